"""Image and token augmentations.

Weak augmentation is geometric (flip, resized crop) and moves labels with the
image. Strong augmentation is photometric only, so pixel ``(i, j)`` of a
strong view still lines up with pixel ``(i, j)`` of the weak view it came
from. Token mixing swaps embedded patches between a labeled and an unlabeled
image and later restores the unlabeled ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


# -- token masks -------------------------------------------------------------

@dataclass(frozen=True)
class TokenMask:
    """Binary per-token vector; 1 marks a token to exchange."""

    m: np.ndarray
    swap_ratio: float

    def __post_init__(self):
        m = np.asarray(self.m)
        if m.ndim != 1 or not np.isin(m, (0, 1)).all():
            raise ValueError("token mask must be a 1-d 0/1 vector")

    def __len__(self) -> int:
        return len(self.m)

    @property
    def popcount(self) -> int:
        return int(np.asarray(self.m).sum())

    def to_string(self) -> str:
        return "".join(str(int(v)) for v in self.m)

    @classmethod
    def from_string(cls, s: str) -> "TokenMask":
        m = np.array([int(ch) for ch in s.strip()], dtype=np.uint8)
        return cls(m, m.sum() / len(m) if len(m) else 0.0)


def _check_ratio(swap_ratio: float) -> None:
    if not 0.0 <= swap_ratio <= 1.0:
        raise ConfigError(f"swap_ratio must lie in [0, 1], got {swap_ratio}")


def gen_token_mask(n_tokens: int, swap_ratio: float, rng: np.random.Generator) -> TokenMask:
    """Exactly ``round(swap_ratio * n_tokens)`` ones at uniformly drawn positions."""
    _check_ratio(swap_ratio)
    k = int(round(swap_ratio * n_tokens))
    m = np.zeros(n_tokens, dtype=np.uint8)
    m[rng.choice(n_tokens, size=k, replace=False)] = 1
    return TokenMask(m, swap_ratio)


def tokenmix_star_mask(n_tokens_per_side: int, block_size: int, swap_ratio: float,
                       rng: np.random.Generator) -> TokenMask:
    """Block-structured mask: whole ``block_size x block_size`` token squares.

    Baseline for comparison; ``round(swap_ratio * n_blocks)`` blocks are drawn.
    """
    _check_ratio(swap_ratio)
    if block_size < 1 or n_tokens_per_side % block_size:
        raise ConfigError(
            f"block_size {block_size} must divide tokens per side {n_tokens_per_side}"
        )
    nb = n_tokens_per_side // block_size
    k = int(round(swap_ratio * nb * nb))
    blocks = np.zeros(nb * nb, dtype=np.uint8)
    blocks[rng.choice(nb * nb, size=k, replace=False)] = 1
    grid = np.kron(blocks.reshape(nb, nb), np.ones((block_size, block_size), dtype=np.uint8))
    return TokenMask(grid.reshape(-1), swap_ratio)


def _mask_array(mask, n: int) -> np.ndarray:
    m = np.asarray(mask.m if isinstance(mask, TokenMask) else mask)
    if m.shape[-1] != n:
        raise ShapeError(f"mask of length {m.shape[-1]} for {n} tokens")
    return m.astype(bool)[..., None]


def token_exchange(g_u, g_l, mask) -> tuple[Tensor, Tensor]:
    """Swap the masked tokens of two ``[B x] n x d`` token sets.

    Both outputs are computed from the inputs as given, so applying the
    exchange twice with the same mask restores the original pair.
    ``mask`` may be one :class:`TokenMask`, a length-n vector, or ``B x n``.
    """
    g_u, g_l = T.as_tensor(g_u), T.as_tensor(g_l)
    if g_u.shape != g_l.shape:
        raise ShapeError(f"token_exchange: shapes {g_u.shape} and {g_l.shape} differ")
    m = _mask_array(mask, g_u.shape[-2])
    return T.where(m, g_l, g_u), T.where(m, g_u, g_l)


def token_swap_back(f_u, f_l, mask) -> Tensor:
    """Return masked token rows of the unlabeled stream from ``f_l``."""
    f_u, f_l = T.as_tensor(f_u), T.as_tensor(f_l)
    if f_u.shape != f_l.shape:
        raise ShapeError(f"token_swap_back: shapes {f_u.shape} and {f_l.shape} differ")
    return T.where(_mask_array(mask, f_u.shape[-2]), f_l, f_u)


# -- weak (geometric) ----------------------------------------------------

@dataclass(frozen=True)
class WeakParams:
    flip: bool
    top: float
    left: float
    crop: float  # side length of the square crop, in pixels


def sample_weak(size: int, rng: np.random.Generator, flip_prob: float = 0.5,
                scale_range: tuple[float, float] = (0.8, 1.0)) -> WeakParams:
    flip = bool(rng.random() < flip_prob)
    crop = size * rng.uniform(*scale_range)
    top = rng.uniform(0.0, size - crop)
    left = rng.uniform(0.0, size - crop)
    return WeakParams(flip, top, left, crop)


def _sample_coords(size: int, start: float, crop: float) -> np.ndarray:
    # output pixel centres mapped into the crop window, in source pixel units
    return start + (np.arange(size) + 0.5) * (crop / size) - 0.5


def apply_weak(image: np.ndarray, label: Optional[np.ndarray], params: WeakParams):
    """Crop-resize (bilinear image, nearest label), then optional horizontal flip."""
    h, w = image.shape[:2]
    ys = np.clip(_sample_coords(h, params.top, params.crop), 0, h - 1)
    xs = np.clip(_sample_coords(w, params.left, params.crop), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    out_label = None
    if label is not None:
        ny = np.clip(np.floor(ys + 0.5).astype(int), 0, h - 1)
        nx = np.clip(np.floor(xs + 0.5).astype(int), 0, w - 1)
        out_label = label[ny][:, nx]
    if params.flip:
        out = out[:, ::-1]
        out_label = out_label[:, ::-1] if out_label is not None else None
    out = np.ascontiguousarray(out)
    if out_label is not None:
        out_label = np.ascontiguousarray(out_label)
    return out, out_label


def weak_augment(image: np.ndarray, label: Optional[np.ndarray], rng: np.random.Generator,
                 flip_prob: float = 0.5, scale_range: tuple[float, float] = (0.8, 1.0)):
    """Random horizontal flip and random resized square crop back to full size."""
    params = sample_weak(image.shape[0], rng, flip_prob, scale_range)
    return apply_weak(image, label, params)


# -- strong (photometric) ------------------------------------------------

@dataclass(frozen=True)
class StrongAugConfig:
    """Jitter amplitudes and per-op probabilities; all zero means identity."""

    brightness: float = 0.5
    contrast: float = 0.5
    shuffle_prob: float = 0.2
    blur_prob: float = 0.5
    gray_prob: float = 0.2

    @classmethod
    def identity(cls) -> "StrongAugConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


_LUMA = np.array([0.299, 0.587, 0.114])


def box_blur(image: np.ndarray) -> np.ndarray:
    """3x3 mean filter with edge replication."""
    h, w = image.shape[:2]
    p = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + h, dx:dx + w]
    return acc / 9.0


def strong_augment(image: np.ndarray, rng: np.random.Generator,
                   config: StrongAugConfig = StrongAugConfig()) -> np.ndarray:
    """Brightness/contrast jitter, channel shuffle, box blur, grayscale; clamped to [0, 1].

    Every random draw happens regardless of the config so the rng advances
    identically whichever ops are switched off.
    """
    b = 1.0 + rng.uniform(-config.brightness, config.brightness)
    c = 1.0 + rng.uniform(-config.contrast, config.contrast)
    do_shuffle = rng.random() < config.shuffle_prob
    perm = rng.permutation(3)
    do_blur = rng.random() < config.blur_prob
    do_gray = rng.random() < config.gray_prob

    out = image * b if b != 1.0 else image
    if c != 1.0:
        mu = out.mean()
        out = (out - mu) * c + mu
    if do_shuffle:
        out = out[..., perm]
    if do_blur:
        out = box_blur(out)
    if do_gray:
        out = np.repeat((out @ _LUMA)[..., None], 3, axis=-1)
    return np.clip(out, 0.0, 1.0)


# -- pixel-level mixing baselines -----------------------------------------

def cutmix_box(h: int, w: int, rng: np.random.Generator,
               ratio_range: tuple[float, float] = (0.2, 0.5)) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random box covering ~ratio of the frame."""
    ratio = rng.uniform(*ratio_range)
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0))) if 0.0 < ratio < 1.0 else 1.0
    bh = int(np.clip(round(np.sqrt(ratio * aspect) * h), 0, h))
    bw = int(np.clip(round(np.sqrt(ratio / aspect) * w), 0, w))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return top, left, bh, bw


def cutmix_mask(h: int, w: int, rng: np.random.Generator,
                ratio_range: tuple[float, float] = (0.2, 0.5)) -> np.ndarray:
    """Boolean ``h x w`` map, True where pixels come from the second image."""
    top, left, bh, bw = cutmix_box(h, w, rng, ratio_range)
    m = np.zeros((h, w), dtype=bool)
    m[top:top + bh, left:left + bw] = True
    return m


def paste(mask: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``b`` where ``mask`` else ``a``; mask is ``H x W``, arrays may carry channels."""
    if a.shape != b.shape:
        raise ShapeError(f"cannot mix arrays of shapes {a.shape} and {b.shape}")
    m = mask if a.ndim == mask.ndim else mask[..., None]
    return np.where(m, b, a)


def cutmix(image_a, label_a, image_b, label_b, rng: np.random.Generator,
           ratio_range: tuple[float, float] = (0.2, 0.5)):
    """Copy one random rectangle of ``b`` into ``a``, image and label alike."""
    if image_a.shape != image_b.shape or label_a.shape != label_b.shape:
        raise ShapeError("cutmix operands differ in shape")
    m = cutmix_mask(image_a.shape[0], image_a.shape[1], rng, ratio_range)
    return paste(m, image_a, image_b), paste(m, label_a, label_b)


def classmix_mask(pseudo_b: np.ndarray, rng: np.random.Generator,
                  classes: Optional[np.ndarray] = None) -> np.ndarray:
    """Pixels of ``pseudo_b`` belonging to a random half (rounded up) of its classes."""
    if classes is None:
        present = np.unique(pseudo_b)
        k = (len(present) + 1) // 2
        classes = rng.choice(present, size=k, replace=False)
    return np.isin(pseudo_b, classes)


def classmix(image_a, label_a, image_b, pseudo_b, rng: np.random.Generator,
             classes: Optional[np.ndarray] = None):
    """Paste the pixels of the selected classes of ``b`` onto ``a``."""
    if image_a.shape != image_b.shape or label_a.shape != pseudo_b.shape:
        raise ShapeError("classmix operands differ in shape")
    m = classmix_mask(pseudo_b, rng, classes)
    return paste(m, image_a, image_b), paste(m, label_a, pseudo_b)
