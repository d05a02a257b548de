"""Teacher-student training with confidence-gated pseudo-labels and two branches.

Each step computes a supervised loss on weakly augmented labeled images, asks
the EMA teacher for pseudo-labels on weakly augmented unlabeled images, and
trains the student on two strongly augmented branches of those images. A
branch may mix tokens with the labeled batch and drop out encoder features,
according to the branch design:

====  ==========================  ==========================
name  branch 1                    branch 2
====  ==========================  ==========================
D1    token mix                   token mix
D2    token mix                   dropout
D3    token mix + dropout         token mix + dropout
D4    token mix + dropout         token mix
====  ==========================  ==========================
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from . import augment as A
from . import tensor as T
from .data import Scene
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .model import ModelConfig, SegmenterModel, decode, encode, feature_dropout, forward, patch_embed
from .tensor import Tensor

MIX_MODES = ("tokenmix", "tokenmix_star", "cutmix", "classmix", "none")


@dataclass(frozen=True)
class BranchFlags:
    use_tokenmix: bool
    use_dropout: bool


BRANCH_DESIGNS = {
    "D1": (BranchFlags(True, False), BranchFlags(True, False)),
    "D2": (BranchFlags(True, False), BranchFlags(False, True)),
    "D3": (BranchFlags(True, True), BranchFlags(True, True)),
    "D4": (BranchFlags(True, True), BranchFlags(True, False)),
}


@dataclass(frozen=True)
class AugConfig:
    """Augmentation knobs.

    ``mix`` picks what a branch's "token mix" flag does: the token-level
    exchange, its block-structured variant, a pixel-level CutMix/ClassMix
    between unlabeled images, or nothing.
    """

    mix: str = "tokenmix"
    swap_ratio: float = 0.25
    block_size: int = 2
    dropout_rate: float = 0.1
    weak: bool = True
    flip_prob: float = 0.5
    scale_min: float = 0.8
    strong: bool = True
    brightness: float = 0.25
    contrast: float = 0.25
    shuffle_prob: float = 0.0
    blur_prob: float = 0.5
    gray_prob: float = 0.0

    def __post_init__(self):
        if self.mix not in MIX_MODES:
            raise ConfigError(f"mix must be one of {MIX_MODES}, got {self.mix!r}")
        if not 0.0 <= self.swap_ratio <= 1.0:
            raise ConfigError(f"swap_ratio must lie in [0, 1], got {self.swap_ratio}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")
        if not 0.0 < self.scale_min <= 1.0:
            raise ConfigError(f"scale_min must lie in (0, 1], got {self.scale_min}")
        for name in ("flip_prob", "shuffle_prob", "blur_prob", "gray_prob", "brightness", "contrast"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")

    def strong_config(self) -> A.StrongAugConfig:
        if not self.strong:
            return A.StrongAugConfig.identity()
        return A.StrongAugConfig(self.brightness, self.contrast, self.shuffle_prob,
                                 self.blur_prob, self.gray_prob)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    sgd_momentum: float = 0.0001
    poly_power: float = 0.9
    epochs: int = 60
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    branch_design: str = "D3"
    theta: float = 0.999
    rho: float = 0.95
    sup_only: bool = False
    burn_in_epochs: int = 40
    precision: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.branch_design not in BRANCH_DESIGNS:
            raise ConfigError(f"branch_design must be one of {sorted(BRANCH_DESIGNS)}, got {self.branch_design!r}")
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ConfigError(f"sgd_momentum must lie in [0, 1), got {self.sgd_momentum}")
        if self.poly_power < 0:
            raise ConfigError(f"poly_power must be non-negative, got {self.poly_power}")
        if not 0 <= self.burn_in_epochs <= self.epochs:
            raise ConfigError(f"burn_in_epochs must lie in [0, epochs], got {self.burn_in_epochs}")
        for name in ("epochs", "batch_labeled", "batch_unlabeled"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("theta", "rho"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


# -- pieces of the step ---------------------------------------------------

Params = Union[SegmenterModel, Mapping[str, np.ndarray]]


def _arrays(model: Params) -> Mapping[str, np.ndarray]:
    if isinstance(model, SegmenterModel):
        return {k: v.data for k, v in model.params.items()}
    return model


def ema_update(teacher: SegmenterModel, student: Params, theta: float) -> SegmenterModel:
    """In place: every teacher parameter becomes ``theta * t + (1 - theta) * s``."""
    src = _arrays(student)
    if set(src) != set(teacher.params):
        raise ShapeError("teacher and student parameter names differ")
    for name, t in teacher.params.items():
        s = src[name]
        if s.shape != t.shape:
            raise ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data = theta * t.data + (1.0 - theta) * s
    return teacher


def pseudo_label_from_logits(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax (ties go to the lowest class) and max softmax probability."""
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs = z / z.sum(axis=-1, keepdims=True)
    return logits.argmax(axis=-1), probs.max(axis=-1)


def pseudo_label(teacher: SegmenterModel, weak_images) -> tuple[np.ndarray, np.ndarray]:
    with T.no_grad():
        logits = forward(weak_images, teacher).data
    return pseudo_label_from_logits(logits)


def supervised_loss(student: SegmenterModel, images, labels) -> Tensor:
    """Cross-entropy over every pixel of the labeled batch."""
    logits = forward(images, student)
    c = student.config.num_classes
    return T.cross_entropy(logits.reshape(-1, c), np.asarray(labels).reshape(-1))


def dual_branch_loss(b1, b2):
    return (b1 + b2) * 0.5


def poly_lr(lr0: float, it: int, total_iters: int, power: float = 0.9) -> float:
    if not 0 <= it <= total_iters:
        raise ContractError(f"poly_lr: iteration {it} outside [0, {total_iters}]")
    return lr0 * (1.0 - it / total_iters) ** power


def sgd_momentum_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Optional[np.ndarray]],
                      velocity: Mapping[str, np.ndarray], lr: float, momentum: float):
    """``v' = momentum * v + g``; ``p' = p - lr * v'``. Missing grads count as zero."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        v = velocity[name]
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        new_v[name] = momentum * v + g
        new_p[name] = p - lr * new_v[name]
    return new_p, new_v


def replicate_labeled(labeled_set: Sequence, target_count: int) -> list:
    """Cycle through ``labeled_set`` until ``target_count`` items are listed."""
    if not labeled_set:
        raise ConfigError("labeled set is empty")
    n = len(labeled_set)
    return [labeled_set[i % n] for i in range(target_count)]


def _mix_masks(mode: str, n: int, count: int, grid: int, aug: AugConfig,
               rng: np.random.Generator) -> np.ndarray:
    if mode == "tokenmix":
        masks = [A.gen_token_mask(n, aug.swap_ratio, rng).m for _ in range(count)]
    else:
        masks = [A.tokenmix_star_mask(grid, aug.block_size, aug.swap_ratio, rng).m for _ in range(count)]
    return np.stack(masks)


def unsupervised_branch_loss(student: SegmenterModel, weak_images: np.ndarray,
                             pseudo: tuple[np.ndarray, np.ndarray], rho: float,
                             flags: BranchFlags, rng: np.random.Generator,
                             donors: Optional[np.ndarray] = None,
                             aug: AugConfig = AugConfig()) -> Tensor:
    """Student cross-entropy against pseudo-labels on one strongly augmented branch.

    Only pixels whose teacher confidence exceeds ``rho`` count; the loss is
    their mean. With token mixing, unlabeled image ``i`` exchanges tokens with
    ``donors[i % len(donors)]`` after the patch embedding, both mixed sets go
    through the encoder, and the unlabeled tokens are swapped back before
    dropout and decoding. The mixed labeled stream carries no loss of its own.
    """
    cfg = student.config
    y, conf = pseudo
    weak_images = np.asarray(weak_images)
    b = len(weak_images)
    strong_cfg = aug.strong_config()
    strong = np.stack([A.strong_augment(x, rng, strong_cfg) for x in weak_images])

    mode = aug.mix if flags.use_tokenmix else "none"
    if mode in ("cutmix", "classmix"):
        partner = np.roll(np.arange(b), -1)
        h, w = strong.shape[1:3]
        if mode == "cutmix":
            pm = np.stack([A.cutmix_mask(h, w, rng) for _ in range(b)])
        else:
            pm = np.stack([A.classmix_mask(y[j], rng) for j in partner])
        strong = A.paste(pm, strong, strong[partner])
        y = np.where(pm, y[partner], y)
        conf = np.where(pm, conf[partner], conf)

    tokens = patch_embed(strong, student)
    if mode in ("tokenmix", "tokenmix_star"):
        if donors is None or len(donors) == 0:
            raise ContractError("token mixing needs a labeled donor batch")
        donor_idx = np.arange(b) % len(donors)
        donor_tokens = patch_embed(np.asarray(donors)[donor_idx], student)
        masks = _mix_masks(mode, cfg.n_tokens, b, cfg.grid, aug, rng)
        g_u, g_l = A.token_exchange(tokens, donor_tokens, masks)
        f = encode(T.concat([g_u, g_l], axis=0), student)
        feats = A.token_swap_back(f[:b], f[b:], masks)
    else:
        feats = encode(tokens, student)
    if flags.use_dropout:
        feats = feature_dropout(feats, aug.dropout_rate, rng)
    logits = decode(feats, student)
    valid = (conf > rho).reshape(-1)
    return T.cross_entropy(logits.reshape(-1, cfg.num_classes), y.reshape(-1), valid)


# -- trainer -------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    l_sup: float
    l_unsup1: float
    l_unsup2: float
    gate_frac: float
    lr: float
    theta: float
    rho: float

    def line(self) -> str:
        return " ".join(f"{k}={v!r}" for k, v in self.__dict__.items())


class SSLTrainer:
    """Owns the student, the EMA teacher, optimizer state and rng streams.

    During the first ``burn_in_steps`` steps only the supervised loss is
    used and the teacher copies the student (an EMA step with theta 0).

    Rng streams are split from ``train.seed``: model init, labeled weak
    augmentation, unlabeled weak augmentation, data order, and one stream per
    branch. Supervised-only training therefore consumes exactly the same
    draws for its labeled path as the full method.
    """

    def __init__(self, model_config: ModelConfig, train: TrainConfig,
                 aug: AugConfig = AugConfig(), total_iters: Optional[int] = None,
                 burn_in_steps: int = 0):
        self.model_config = model_config
        self.train = train
        self.aug = aug
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(train.seed).spawn(6)]
        init_rng, self.labeled_rng, self.unlabeled_rng, self.data_rng, *self.branch_rngs = streams
        self.student = SegmenterModel.init(model_config, init_rng, dtype=train.dtype)
        self.teacher = self.student.copy()
        for p in self.teacher.params.values():
            p.requires_grad = False
        self.velocity = {k: np.zeros_like(v.data) for k, v in self.student.params.items()}
        self.step = 0
        self.total_iters = total_iters
        self.burn_in_steps = burn_in_steps
        self.history: list[StepMetrics] = []
        self.on_pre_update: Optional[Callable[["SSLTrainer"], None]] = None

    # batches ----------------------------------------------------------
    def steps_per_epoch(self, n_unlabeled: int) -> int:
        return math.ceil(n_unlabeled / self.train.batch_unlabeled)

    def epoch_batches(self, labeled: Sequence[Scene], unlabeled: Sequence[Scene]) -> Iterator[tuple[list, list]]:
        """Shuffled batches; labeled scenes are replicated to the unlabeled count."""
        tr = self.train
        steps = self.steps_per_epoch(len(unlabeled))
        lab = replicate_labeled(labeled, steps * tr.batch_labeled)
        lab_order = self.data_rng.permutation(len(lab))
        unl_order = self.data_rng.permutation(len(unlabeled))
        for s in range(steps):
            lb = [lab[i] for i in lab_order[s * tr.batch_labeled:(s + 1) * tr.batch_labeled]]
            ub = [unlabeled[i] for i in unl_order[s * tr.batch_unlabeled:(s + 1) * tr.batch_unlabeled]]
            yield lb, ub

    def _weak(self, scenes: Sequence[Scene], rng: np.random.Generator, with_labels: bool):
        aug = self.aug
        flip = aug.flip_prob if aug.weak else 0.0
        scale = (aug.scale_min, 1.0) if aug.weak else (1.0, 1.0)
        images, labels = [], []
        for s in scenes:
            img, lbl = A.weak_augment(s.image, s.label if with_labels else None, rng, flip, scale)
            images.append(img)
            labels.append(lbl)
        images = np.stack(images).astype(self.train.dtype)
        return images, (np.stack(labels) if with_labels else None)

    # step -----------------------------------------------------------
    def train_step(self, labeled_batch: Sequence[Scene], unlabeled_batch: Sequence[Scene]) -> StepMetrics:
        if not labeled_batch or (not unlabeled_batch and not self.train.sup_only):
            raise ContractError("train_step needs non-empty batches")
        tr = self.train
        total = self.total_iters or self.step + 1
        lr = poly_lr(tr.lr0, min(self.step, total), total, tr.poly_power)

        weak_l, y_l = self._weak(labeled_batch, self.labeled_rng, with_labels=True)
        l_sup = supervised_loss(self.student, weak_l, y_l)
        l1 = l2 = 0.0
        gate = 0.0
        loss = l_sup
        burn_in = self.step < self.burn_in_steps
        theta = 0.0 if burn_in else tr.theta
        if not (tr.sup_only or burn_in):
            weak_u, _ = self._weak(unlabeled_batch, self.unlabeled_rng, with_labels=False)
            y_u, conf = pseudo_label(self.teacher, weak_u)
            gate = float((conf > tr.rho).mean())
            flags = BRANCH_DESIGNS[tr.branch_design]
            b1, b2 = (
                unsupervised_branch_loss(self.student, weak_u, (y_u, conf), tr.rho, f, rng, weak_l, self.aug)
                for f, rng in zip(flags, self.branch_rngs)
            )
            l1, l2 = b1.item(), b2.item()
            loss = l_sup + dual_branch_loss(b1, b2)

        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss {value} at step {self.step}")
        self.student.zero_grad()
        T.backward(loss)

        if self.on_pre_update is not None:
            self.on_pre_update(self)
        before = {k: v.data for k, v in self.student.params.items()}
        grads = {k: v.grad for k, v in self.student.params.items()}
        new_p, self.velocity = sgd_momentum_step(before, grads, self.velocity, lr, tr.sgd_momentum)
        for k, v in self.student.params.items():
            v.data = new_p[k]
        ema_update(self.teacher, before, theta)

        metrics = StepMetrics(self.step, l_sup.item(), l1, l2, gate, lr, theta, tr.rho)
        self.history.append(metrics)
        self.step += 1
        return metrics

    def fit_epoch(self, labeled: Sequence[Scene], unlabeled: Sequence[Scene],
                  on_step: Optional[Callable[[StepMetrics], None]] = None) -> list[StepMetrics]:
        out = []
        for lb, ub in self.epoch_batches(labeled, unlabeled):
            m = self.train_step(lb, ub)
            out.append(m)
            if on_step is not None:
                on_step(m)
        return out
