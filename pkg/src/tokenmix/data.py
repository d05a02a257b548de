"""Synthetic shape scenes, dataset splits and segmentation metrics."""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ShapeError
from .model import SegmenterModel, predict

SHAPE_KINDS = ("circle", "rectangle", "triangle")


class UndefinedMetricError(ValueError):
    """mIoU requested over a confusion matrix with no populated class."""


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 in [0, 1]
    label: Optional[np.ndarray]  # H x W ints in [0, C), None once discarded
    scene_id: int = -1


@dataclass(frozen=True)
class Shape:
    kind: str
    cls: int
    params: tuple


@dataclass(frozen=True)
class SplitSpec:
    n_labeled: int = 4
    n_unlabeled: int = 128
    n_val: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("n_labeled", "n_unlabeled", "n_val"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")


# -- rendering -------------------------------------------------------------

def _pixel_centres(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="ij")


def shape_mask(shape: Shape, size: int) -> np.ndarray:
    """Pixels whose centre falls inside ``shape``."""
    ys, xs = _pixel_centres(size)
    if shape.kind == "circle":
        cy, cx, r = shape.params
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    if shape.kind == "rectangle":
        y0, x0, y1, x1 = shape.params
        return (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
    if shape.kind == "triangle":
        (ay, ax), (by, bx), (cy, cx) = shape.params

        def edge(py, px, qy, qx):
            return (qx - px) * (ys - py) - (qy - py) * (xs - px)

        e0, e1, e2 = edge(ay, ax, by, bx), edge(by, bx, cy, cx), edge(cy, cx, ay, ax)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render_label(shapes: Sequence[Shape], size: int) -> np.ndarray:
    """Class map; later shapes occlude earlier ones, background is 0."""
    label = np.zeros((size, size), dtype=np.int64)
    for s in shapes:
        label[shape_mask(s, size)] = s.cls
    return label


def class_palette(num_classes: int) -> np.ndarray:
    """Characteristic RGB colour per foreground class (row 0 unused)."""
    pal = np.zeros((num_classes, 3))
    for k in range(1, num_classes):
        pal[k] = colorsys.hsv_to_rgb((k - 1) / max(num_classes - 1, 1), 0.75, 0.85)
    return pal


def render_image(shapes: Sequence[Shape], size: int, rng: np.random.Generator,
                 palette: np.ndarray, color_jitter: float = 0.15,
                 texture_amp: float = 0.08, noise_std: float = 0.05) -> np.ndarray:
    """Textured background plus shapes in jittered class colours, clipped to [0, 1]."""
    ys, xs = _pixel_centres(size)
    base = rng.uniform(0.25, 0.75) + rng.uniform(-0.1, 0.1, size=3)
    texture = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.1, 0.6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(fy * ys + fx * xs + phase)
    image = base + (texture_amp / 3.0) * texture[..., None]
    for s in shapes:
        color = palette[s.cls] + rng.uniform(-color_jitter, color_jitter, size=3)
        image[shape_mask(s, size)] = color
    image = image + rng.normal(0.0, noise_std, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def class_kind(cls: int) -> str:
    """Each foreground class has a characteristic geometry as well as a colour."""
    return SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)]


def sample_shapes(rng: np.random.Generator, size: int, num_classes: int,
                  n_shapes: Optional[int] = None) -> list[Shape]:
    if n_shapes is None:
        n_shapes = int(rng.integers(1, 4))
    shapes = []
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        kind = class_kind(cls)
        if kind == "circle":
            r = rng.uniform(0.2, 0.4) * size
            cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
            params = (cy, cx, r)
        elif kind == "rectangle":
            h, w = rng.uniform(0.35, 0.7, size=2) * size
            y0 = rng.uniform(0, size - h)
            x0 = rng.uniform(0, size - w)
            params = (y0, x0, y0 + h, x0 + w)
        else:
            cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=3))
            radii = rng.uniform(0.35, 0.55, size=3) * size
            params = tuple(
                (float(cy + r * np.sin(a)), float(cx + r * np.cos(a))) for a, r in zip(angles, radii)
            )
        shapes.append(Shape(kind, cls, params))
    return shapes


def gen_scene(rng: np.random.Generator, size: int = 32, num_classes: int = 4,
              n_shapes: Optional[int] = None, shapes: Optional[Sequence[Shape]] = None,
              palette: Optional[np.ndarray] = None) -> Scene:
    """Random scene of 1-3 shapes, or of ``shapes`` if given."""
    if size < 16:
        raise ConfigError(f"scene size must be >= 16, got {size}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if shapes is None:
        shapes = sample_shapes(rng, size, num_classes, n_shapes)
    if palette is None:
        palette = class_palette(num_classes)
    label = render_label(shapes, size)
    image = render_image(shapes, size, rng, palette)
    return Scene(image, label)


def make_splits(spec: SplitSpec, size: int = 32, num_classes: int = 4):
    """Disjoint (labeled, unlabeled, val) scene lists; unlabeled scenes drop labels.

    Scene ``i`` is drawn from its own child of ``SeedSequence(spec.seed)``, so
    every pixel is a function of the seed and the scene's position.
    """
    total = spec.n_labeled + spec.n_unlabeled + spec.n_val
    children = np.random.SeedSequence(spec.seed).spawn(total)
    scenes = []
    for i, child in enumerate(children):
        s = gen_scene(np.random.default_rng(child), size, num_classes)
        s.scene_id = i
        scenes.append(s)
    nl, nu = spec.n_labeled, spec.n_unlabeled
    labeled = scenes[:nl]
    unlabeled = [Scene(s.image, None, s.scene_id) for s in scenes[nl:nl + nu]]
    val = scenes[nl + nu:]
    return labeled, unlabeled, val


# -- metrics -------------------------------------------------------------

def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """``C x C`` counts; entry (i, j) is pixels of true class i predicted j."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise IndexError(f"{name} holds a class outside [0, {num_classes})")
    idx = truth.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def class_iou(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN for classes absent from both truth and prediction."""
    cm = np.asarray(cm, dtype=np.float64)
    if (cm < 0).any():
        raise ValueError("confusion matrix counts must be non-negative")
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    iou = np.full(len(cm), np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return iou


def miou(cm: np.ndarray) -> float:
    iou = class_iou(cm)
    if np.isnan(iou).all():
        raise UndefinedMetricError("no class present in truth or prediction")
    return float(np.nanmean(iou))


def evaluate(model: Union[SegmenterModel, Callable[[np.ndarray], np.ndarray]], val_set: Sequence[Scene], num_classes: Optional[int] = None,
             batch_size: int = 32) -> tuple[float, np.ndarray]:
    """Dataset-level mIoU from one confusion matrix accumulated over ``val_set``.

    ``model`` is a :class:`~tokenmix.model.SegmenterModel` (run without dropout
    or augmentation) or any callable mapping a ``B x H x W x 3`` batch to class maps.
    """
    if not val_set:
        raise ValueError("evaluate needs a non-empty validation set")
    if isinstance(model, SegmenterModel):
        num_classes = model.config.num_classes

        def fn(x):
            return predict(x, model)
    else:
        fn = model
        if num_classes is None:
            raise ValueError("num_classes is required for a callable predictor")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for start in range(0, len(val_set), batch_size):
        chunk = val_set[start:start + batch_size]
        preds = fn(np.stack([s.image for s in chunk]))
        for s, p in zip(chunk, preds):
            cm += confusion_matrix(p, s.label, num_classes)
    return miou(cm), class_iou(cm)


# -- scene archive ---------------------------------------------------------

_HEADER = np.dtype("<i4")


def write_scene_record(path, scene: Scene, num_classes: int) -> None:
    """Little-endian record: int32 H, W, C, has_label; float64 image; int32 label."""
    h, w = scene.image.shape[:2]
    has_label = scene.label is not None
    with open(path, "wb") as fh:
        fh.write(np.array([h, w, num_classes, int(has_label)], dtype=_HEADER).tobytes())
        fh.write(np.ascontiguousarray(scene.image, dtype="<f8").tobytes())
        if has_label:
            fh.write(np.ascontiguousarray(scene.label, dtype="<i4").tobytes())


def read_scene_record(path, scene_id: int = -1) -> tuple[Scene, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    h, w, c, has_label = np.frombuffer(raw[:16], dtype=_HEADER)
    n_img = h * w * 3 * 8
    image = np.frombuffer(raw[16:16 + n_img], dtype="<f8").reshape(h, w, 3).copy()
    label = None
    if has_label:
        label = np.frombuffer(raw[16 + n_img:], dtype="<i4").reshape(h, w).astype(np.int64)
    return Scene(image, label, scene_id), int(c)


def save_archive(directory, spec: SplitSpec, splits: dict[str, Sequence[Scene]],
                 num_classes: int) -> None:
    """One ``scene_XXXXX.bin`` per scene plus ``manifest.txt`` of split membership."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"seed={spec.seed}", f"n_labeled={spec.n_labeled}",
             f"n_unlabeled={spec.n_unlabeled}", f"n_val={spec.n_val}"]
    for name, scenes in splits.items():
        for s in scenes:
            write_scene_record(os.path.join(directory, f"scene_{s.scene_id:05d}.bin"), s, num_classes)
        lines.append(f"split.{name}=" + ",".join(str(s.scene_id) for s in scenes))
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_archive(directory) -> tuple[SplitSpec, dict[str, list[Scene]]]:
    with open(os.path.join(directory, "manifest.txt")) as fh:
        entries = dict(line.strip().split("=", 1) for line in fh if "=" in line)
    spec = SplitSpec(int(entries["n_labeled"]), int(entries["n_unlabeled"]),
                     int(entries["n_val"]), int(entries["seed"]))
    splits = {}
    for key, value in entries.items():
        if key.startswith("split."):
            ids = [int(v) for v in value.split(",") if v]
            splits[key[len("split."):]] = [
                read_scene_record(os.path.join(directory, f"scene_{i:05d}.bin"), i)[0] for i in ids
            ]
    return spec, splits
