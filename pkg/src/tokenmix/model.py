"""Patch-token transformer segmenter: patch embedding, encoder, decoder.

The three stages are separate functions so that token mixing can act on the
embedding output and dropout on the encoder output.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

DECODERS = ("pixel", "upsample")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 4
    # "pixel": each token predicts every pixel of its own patch.
    # "upsample": one logit vector per token, repeated over the patch.
    decoder: str = "pixel"

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "num_layers", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter, in a fixed order."""
    d, h = cfg.embed_dim, cfg.mlp_dim
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.n_tokens, d),
    }
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gamma": (d,),
            p + "ln1.beta": (d,),
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.proj.weight": (d, d),
            p + "attn.proj.bias": (d,),
            p + "ln2.gamma": (d,),
            p + "ln2.beta": (d,),
            p + "mlp.fc1.weight": (d, h),
            p + "mlp.fc1.bias": (h,),
            p + "mlp.fc2.weight": (h, d),
            p + "mlp.fc2.bias": (d,),
        })
    out = cfg.num_classes * (cfg.patch_size**2 if cfg.decoder == "pixel" else 1)
    shapes["decoder.weight"] = (d, out)
    shapes["decoder.bias"] = (cfg.num_classes,)
    return shapes


class SegmenterModel:
    """Parameters of one segmenter plus its config.

    ``params`` maps names to leaf tensors; ordering follows :func:`param_shapes`.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ShapeError("parameter names do not match the config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> "SegmenterModel":
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith("gamma"):
                arr = np.ones(shape)
            elif name == "pos_embed":
                arr = rng.normal(0.0, 0.02, size=shape)
            elif name.endswith("weight"):
                fan_in, fan_out = shape
                arr = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["pos_embed"].dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "SegmenterModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return SegmenterModel(self.config, params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if state[k].shape != v.shape:
                raise ShapeError(f"{k}: expected {v.shape}, got {state[k].shape}")
            v.data[...] = state[k]


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    return x, x.ndim == 3


def _as_input(images, model: SegmenterModel) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.asarray(images, dtype=model.dtype))


def patch_embed(images, model: SegmenterModel) -> Tensor:
    """Project each ``P x P x 3`` patch to ``embed_dim``.

    Accepts ``H x W x 3`` or ``B x H x W x 3``; tokens come out in row-major
    patch order. Positional embeddings are added later, in :func:`encode`.
    """
    cfg = model.config
    x = _as_input(images, model)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ShapeError(
            f"patch_embed expects {cfg.image_size}x{cfg.image_size}x3 images, got {x.shape}"
        )
    b, g, p = x.shape[0], cfg.grid, cfg.patch_size
    patches = x.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
    tokens = patches @ model["patch_embed.weight"] + model["patch_embed.bias"]
    return tokens.reshape(tokens.shape[1:]) if single else tokens


def _attention(x: Tensor, model: SegmenterModel, prefix: str, probe: Optional[list]) -> Tensor:
    cfg = model.config
    b, n, d = x.shape
    h = cfg.num_heads
    dh = d // h
    qkv = x @ model[prefix + "qkv.weight"] + model[prefix + "qkv.bias"]
    qkv = qkv.reshape(b, n, 3, h, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if probe is not None:
        probe.append(attn.data.copy())
    out = (attn @ v).permute(0, 2, 1, 3).reshape(b, n, d)
    return out @ model[prefix + "proj.weight"] + model[prefix + "proj.bias"]


def encode(tokens, model: SegmenterModel, attn_probe: Optional[list] = None) -> Tensor:
    """Add positional embeddings and run the pre-norm transformer blocks.

    If ``attn_probe`` is a list, each layer's attention probabilities
    (``B x heads x n x n``) are appended to it.
    """
    cfg = model.config
    x = _as_input(tokens, model)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.n_tokens, cfg.embed_dim):
        raise ShapeError(
            f"encode expects {cfg.n_tokens}x{cfg.embed_dim} tokens, got {x.shape}"
        )
    x = x + model["pos_embed"]
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        y = T.layer_norm(x, model[p + "ln1.gamma"], model[p + "ln1.beta"])
        x = x + _attention(y, model, p + "attn.", attn_probe)
        y = T.layer_norm(x, model[p + "ln2.gamma"], model[p + "ln2.beta"])
        y = T.gelu(y @ model[p + "mlp.fc1.weight"] + model[p + "mlp.fc1.bias"])
        x = x + (y @ model[p + "mlp.fc2.weight"] + model[p + "mlp.fc2.bias"])
    return x.reshape(x.shape[1:]) if single else x


def decode(features, model: SegmenterModel) -> Tensor:
    """Map token features to per-pixel logits ``H x W x C``.

    Pixels only ever read the feature of the token whose patch contains them.
    """
    cfg = model.config
    f = _as_input(features, model)
    single = f.ndim == 2
    if single:
        f = f.reshape((1,) + f.shape)
    if f.ndim != 3 or f.shape[1:] != (cfg.n_tokens, cfg.embed_dim):
        raise ShapeError(
            f"decode expects {cfg.n_tokens}x{cfg.embed_dim} features, got {f.shape}"
        )
    b, g, p, c = f.shape[0], cfg.grid, cfg.patch_size, cfg.num_classes
    z = f @ model["decoder.weight"]
    if cfg.decoder == "pixel":
        z = z.reshape(b, g, g, p, p, c) + model["decoder.bias"]
    else:
        ones = np.ones((1, 1, 1, p, p, 1), dtype=model.dtype)
        z = (z + model["decoder.bias"]).reshape(b, g, g, 1, 1, c) * ones
    logits = z.permute(0, 1, 3, 2, 4, 5).reshape(b, g * p, g * p, c)
    return logits.reshape(logits.shape[1:]) if single else logits


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def feature_dropout(features, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Elementwise inverted dropout on encoder features; identity at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    f = features if isinstance(features, Tensor) else Tensor(features)
    if rate == 0.0:
        return f
    return f * dropout_mask(f.shape, rate, rng, f.dtype)


def forward(images, model: SegmenterModel, dropout_rate: float = 0.0,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """``decode(feature_dropout(encode(patch_embed(images))))``."""
    f = encode(patch_embed(images, model), model)
    return decode(feature_dropout(f, dropout_rate, rng), model)


def predict(images, model: SegmenterModel) -> np.ndarray:
    """Argmax class map, no dropout and no tape."""
    with T.no_grad():
        logits = forward(images, model).data
    return logits.argmax(axis=-1)


# -- checkpoints -------------------------------------------------------

def _config_from_header(fields: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name in fields:
            kwargs[f.name] = type(f.default)(fields[f.name])
    return ModelConfig(**kwargs)


def save_checkpoint(model: SegmenterModel, path) -> None:
    """Write ``key=value`` config lines, then one ``param:`` record per tensor."""
    lines = [f"{f.name}={getattr(model.config, f.name)}" for f in dataclasses.fields(ModelConfig)]
    lines.append("")
    parts = ["\n".join(lines)]
    for name, p in model.params.items():
        parts.append(f"param: {name}\n" + T.dumps_tensor(p))
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def load_checkpoint(path, dtype=np.float64) -> SegmenterModel:
    with open(path) as fh:
        text = fh.read()
    header, _, body = text.partition("\n\n")
    fields = dict(line.split("=", 1) for line in header.splitlines() if line.strip())
    config = _config_from_header(fields)
    params = {}
    for record in body.split("param: ")[1:]:
        name, _, dump = record.partition("\n")
        t = T.loads_tensor(dump, dtype=dtype)
        params[name.strip()] = Tensor(t.data, requires_grad=True)
    return SegmenterModel(config, params)
