"""Finite-difference checks for every differentiable op and the composed model.

Each check builds random float64 inputs from a seed and compares backward
gradients to central differences (step 1e-5).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import augment as A
from . import tensor as T
from .model import ModelConfig, SegmenterModel, decode, encode, feature_dropout, forward, patch_embed
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _leaf(rng, *shape, scale=1.0, offset=0.0):
    return Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True)


def _scalar(fn: Callable[[], Tensor], rng) -> T.Projection:
    # random projection to a scalar so every output element matters
    return T.Projection(fn, rng.standard_normal(fn().shape))


def _check_elementwise(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    c = _leaf(rng, 3, 1, offset=3.0, scale=0.3)
    return _scalar(lambda: (a + b) * c - a / c + T.neg(b) * b, rng), [a, b, c]


def _check_exp_log(rng):
    a = _leaf(rng, 2, 5, scale=0.5)
    p = _leaf(rng, 2, 5, scale=0.2, offset=2.0)
    return _scalar(lambda: T.exp(a) + T.log(p), rng), [a, p]


def _check_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return _scalar(lambda: a @ b, rng), [a, b]


def _check_batched_matmul(rng):
    a, b, w = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5), _leaf(rng, 5, 2)
    return _scalar(lambda: (a @ b) @ w, rng), [a, b, w]


def _check_softmax(rng):
    a = _leaf(rng, 3, 5)
    return _scalar(lambda: T.softmax(a, axis=-1), rng), [a]


def _check_log_softmax(rng):
    a = _leaf(rng, 3, 5)
    return _scalar(lambda: T.log_softmax(a, axis=-1), rng), [a]


def _check_layer_norm(rng):
    x, g, b = _leaf(rng, 2, 3, 6), _leaf(rng, 6, offset=1.0), _leaf(rng, 6)
    return _scalar(lambda: T.layer_norm(x, g, b), rng), [x, g, b]


def _check_gelu(rng):
    a = _leaf(rng, 4, 5, scale=2.0)
    return _scalar(lambda: T.gelu(a), rng), [a]


def _check_cross_entropy(rng):
    logits = _leaf(rng, 12, 4, scale=2.0)
    targets = rng.integers(0, 4, size=12)
    valid = rng.random(12) < 0.6
    valid[0] = True
    return (lambda: T.cross_entropy(logits, targets, valid)), [logits]


def _check_shape_ops(rng):
    a = _leaf(rng, 2, 3, 4)
    b = _leaf(rng, 2, 3, 4)

    def fn():
        x = a.reshape(6, 4).permute(1, 0)[1:3]
        y = T.concat([a, b], axis=1).swapaxes(0, 2)[::2, 1]
        z = T.where(np.arange(4) % 2 == 0, a, b).mean(axis=1)
        return x.sum() * 0.5 + (y * y).sum(axis=0).sum() + (z * z).sum()

    return fn, [a, b]


def _check_token_mixing(rng):
    g_u, g_l = _leaf(rng, 2, 9, 3), _leaf(rng, 2, 9, 3)
    w = _leaf(rng, 3, 3)
    masks = np.stack([A.gen_token_mask(9, 0.5, rng).m for _ in range(2)])

    def fn():
        a, b = A.token_exchange(g_u, g_l, masks)
        f = T.concat([a, b], axis=0) @ w
        return T.gelu(A.token_swap_back(f[:2], f[2:], masks))

    return _scalar(fn, rng), [g_u, g_l, w]


def _check_dropout(rng):
    a = _leaf(rng, 4, 6)
    seed = int(rng.integers(1 << 30))
    return _scalar(lambda: feature_dropout(a, 0.3, np.random.default_rng(seed)), rng), [a]


def toy_config(decoder: str = "pixel") -> ModelConfig:
    """Four-token model small enough for exhaustive finite differences."""
    return ModelConfig(image_size=4, patch_size=2, embed_dim=8, num_layers=1, num_heads=2,
                       mlp_ratio=2.0, num_classes=3, decoder=decoder)


def _check_model(rng, decoder):
    model = SegmenterModel.init(toy_config(decoder), rng)
    # larger init than default so attention and LN gradients are not tiny
    for name, p in model.params.items():
        p.data += 0.3 * rng.standard_normal(p.shape)
    images = rng.random((2, 4, 4, 3))
    labels = rng.integers(0, 3, size=(2, 4, 4))

    def fn():
        logits = forward(images, model)
        return T.cross_entropy(logits.reshape(-1, 3), labels.reshape(-1))

    return fn, list(model.params.values())


def _check_model_branch(rng):
    """Token exchange, encoder, swap-back, dropout and gated loss together."""
    model = SegmenterModel.init(toy_config(), rng)
    for p in model.params.values():
        p.data += 0.3 * rng.standard_normal(p.shape)
    u, l = rng.random((2, 4, 4, 3)), rng.random((2, 4, 4, 3))
    pseudo = rng.integers(0, 3, size=(2, 4, 4))
    valid = rng.random(32) < 0.7
    seed = int(rng.integers(1 << 30))

    def fn():
        r = np.random.default_rng(seed)
        masks = np.stack([A.gen_token_mask(4, 0.5, r).m for _ in range(2)])
        g_u, g_l = A.token_exchange(patch_embed(u, model), patch_embed(l, model), masks)
        f = encode(T.concat([g_u, g_l], axis=0), model)
        f = feature_dropout(A.token_swap_back(f[:2], f[2:], masks), 0.2, r)
        logits = decode(f, model)
        return T.cross_entropy(logits.reshape(-1, 3), pseudo.reshape(-1), valid)

    return fn, list(model.params.values())


CHECKS = {
    "elementwise": _check_elementwise,
    "exp_log": _check_exp_log,
    "matmul": _check_matmul,
    "batched_matmul": _check_batched_matmul,
    "softmax": _check_softmax,
    "log_softmax": _check_log_softmax,
    "layer_norm": _check_layer_norm,
    "gelu": _check_gelu,
    "cross_entropy": _check_cross_entropy,
    "shape_ops": _check_shape_ops,
    "token_mixing": _check_token_mixing,
    "dropout": _check_dropout,
    "model_pixel": lambda rng: _check_model(rng, "pixel"),
    "model_upsample": lambda rng: _check_model(rng, "upsample"),
    "model_branch": _check_model_branch,
}


def run_check(name: str, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    fn, tensors = CHECKS[name](rng)
    return CheckResult(name, seed, T.gradcheck(fn, tensors, STEP))


def run_suite(seeds=range(20), names=None) -> list[CheckResult]:
    names = list(CHECKS) if names is None else names
    return [run_check(n, s) for n in names for s in seeds]
