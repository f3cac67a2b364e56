"""Miniature Vision Transformer: configuration, weights, forward pass.

The classifier is patch embedding + learned positional table, a stack of
attention blocks, mean pooling over tokens and a linear head. Each block
computes, for input ``X [T, C]``::

    Q = X Wq   K = X Wk   V = X Wv
    head_h = softmax(Q_h K_h^T / sqrt(d)) V_h          d = C / heads
    A  = concat(head_0 .. head_{h-1})
    A' = A Wp + X
    Y  = MLP(A') + A'                                   MLP(z) = act(z W1 + b1) W2 + b2

With ``use_layernorm`` enabled the block switches to the pre-normalised
form (normalise before attention and before the MLP, residuals on the raw
stream); the affine normalisation parameters are the ones a
normalisation-excluding federation strategy keeps client-local.

All weights live in one :class:`~fedvit.autodiff.ParamSet` under canonical
names: ``patch_embed``, ``pos_embed``, ``block{i}.{wq,wk,wv,wp,mlp_w1,
mlp_b1,mlp_w2,mlp_b2[,ln1_g,ln1_b,ln2_g,ln2_b]}``, ``head_w``, ``head_b``.
Federation strategies match on these names.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import (
    ParamSet,
    ShapeError,
    Tensor,
    add,
    concat_cols,
    concat_rows,
    layer_norm,
    matmul,
    mean_rows,
    relu,
    reshape,
    scale,
    slice_cols,
    softmax_rows,
    tanh,
    transpose,
)

__all__ = [
    "LN_EPS",
    "ViTConfig",
    "BlockWeights",
    "init_model",
    "parameter_shapes",
    "patchify",
    "mhsa",
    "transformer_block",
    "forward",
    "forward_batch",
    "mhsa_flops",
    "save_checkpoint",
    "load_checkpoint",
]

LN_EPS = 1e-5

_ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass(frozen=True)
class ViTConfig:
    """Shape of the miniature classifier.

    Defaults are the desk-scale setup used throughout: 16x16 single-channel
    images cut into 4x4 patches (16 tokens), width 32 split over 2 heads,
    2 blocks, and a 3-class head.
    """

    image_h: int = 16
    image_w: int = 16
    channels_in: int = 1
    patch: int = 4
    dim: int = 32
    heads: int = 2
    blocks: int = 2
    mlp_hidden: int = 64
    classes: int = 3
    use_layernorm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        for name in ("image_h", "image_w", "channels_in", "patch", "dim",
                     "heads", "blocks", "mlp_hidden", "classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError("image sides must be divisible by the patch size")
        if self.dim % self.heads:
            raise ValueError("embedding width must be divisible by the head count")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def tokens(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels_in


@dataclass(frozen=True)
class BlockWeights:
    """View over one block's tensors, resolved from canonical names."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wp: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    ln1_g: Tensor | None = None
    ln1_b: Tensor | None = None
    ln2_g: Tensor | None = None
    ln2_b: Tensor | None = None

    @classmethod
    def from_params(cls, params: ParamSet, index: int, use_layernorm: bool) -> "BlockWeights":
        p = f"block{index}."
        kwargs = {name: params[p + name]
                  for name in ("wq", "wk", "wv", "wp", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")}
        if use_layernorm:
            for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                kwargs[name] = params[p + name]
        return cls(**kwargs)


def parameter_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for a model of this configuration."""
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed": (config.patch_dim, config.dim),
        "pos_embed": (config.tokens, config.dim),
    }
    c, hid = config.dim, config.mlp_hidden
    for i in range(config.blocks):
        p = f"block{i}."
        shapes[p + "wq"] = (c, c)
        shapes[p + "wk"] = (c, c)
        shapes[p + "wv"] = (c, c)
        shapes[p + "wp"] = (c, c)
        shapes[p + "mlp_w1"] = (c, hid)
        shapes[p + "mlp_b1"] = (hid,)
        shapes[p + "mlp_w2"] = (hid, c)
        shapes[p + "mlp_b2"] = (c,)
        if config.use_layernorm:
            for name in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                shapes[p + name] = (c,)
    shapes["head_w"] = (config.dim, config.classes)
    shapes["head_b"] = (config.classes,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    # Resample anything beyond two standard deviations.
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_model(config: ViTConfig, seed: int) -> ParamSet:
    """Fresh weights: truncated Normal(0, 0.02^2) matrices, zero biases and
    positional table, unit/zero normalisation affines. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    std = 0.02
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        base = name.split(".")[-1]
        if base in ("wq", "wk", "wv", "wp", "mlp_w1", "mlp_w2", "head_w", "patch_embed"):
            arrays[name] = _truncated_normal(rng, shape, std)
        elif base in ("ln1_g", "ln2_g"):
            arrays[name] = np.ones(shape)
        else:  # biases, pos_embed, ln betas
            arrays[name] = np.zeros(shape)
    return ParamSet.from_arrays(arrays)


def patchify(image: Tensor, config: ViTConfig) -> Tensor:
    """Cut an ``[H, W, channels]`` image into flattened non-overlapping patches.

    Token order is row-major over the patch grid; within a patch, pixels are
    row-major with the channel index fastest.
    """
    h, w, ch, p = config.image_h, config.image_w, config.channels_in, config.patch
    if image.shape != (h, w, ch):
        raise ShapeError(f"expected image of shape {(h, w, ch)}, got {image.shape}")
    grid = image.array.reshape(h // p, p, w // p, p, ch)
    tokens = grid.transpose(0, 2, 1, 3, 4).reshape(config.tokens, config.patch_dim)
    return Tensor(tokens)


def _attention(x: Tensor, block: BlockWeights, heads: int) -> Tensor:
    """Multi-head attention of ``x`` with the output projection, no residual."""
    c = x.shape[1]
    d = c // heads
    q = matmul(x, block.wq)
    k = matmul(x, block.wk)
    v = matmul(x, block.wv)
    outs = []
    for h in range(heads):
        lo, hi = h * d, (h + 1) * d
        scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))),
                       1.0 / math.sqrt(d))
        outs.append(matmul(softmax_rows(scores), slice_cols(v, lo, hi)))
    mixed = outs[0] if heads == 1 else concat_cols(outs)
    return matmul(mixed, block.wp)


def mhsa(x: Tensor, block: BlockWeights, heads: int) -> Tensor:
    """Self-attention sublayer ``A Wp + X`` for ``x [T, C]``."""
    if x.array.ndim != 2:
        raise ShapeError(f"mhsa needs [tokens, dim] input, got {x.shape}")
    if x.shape[1] % heads:
        raise ShapeError(f"width {x.shape[1]} not divisible by {heads} heads")
    return add(_attention(x, block, heads), x)


def _mlp(z: Tensor, block: BlockWeights, activation: str) -> Tensor:
    act = _ACTIVATIONS[activation]
    hidden = act(add(matmul(z, block.mlp_w1), block.mlp_b1))
    return add(matmul(hidden, block.mlp_w2), block.mlp_b2)


def transformer_block(x: Tensor, block: BlockWeights, config: ViTConfig) -> Tensor:
    """One encoder block: attention sublayer then MLP sublayer, both residual."""
    if config.use_layernorm:
        normed = layer_norm(x, block.ln1_g, block.ln1_b, LN_EPS)
        attended = add(_attention(normed, block, config.heads), x)
        normed2 = layer_norm(attended, block.ln2_g, block.ln2_b, LN_EPS)
        return add(_mlp(normed2, block, config.activation), attended)
    attended = mhsa(x, block, config.heads)
    return add(_mlp(attended, block, config.activation), attended)


def _logits_row(params: ParamSet, image: Tensor, config: ViTConfig) -> Tensor:
    tokens = add(matmul(patchify(image, config), params["patch_embed"]), params["pos_embed"])
    for i in range(config.blocks):
        block = BlockWeights.from_params(params, i, config.use_layernorm)
        tokens = transformer_block(tokens, block, config)
    pooled = mean_rows(tokens)
    return add(matmul(pooled, params["head_w"]), params["head_b"])


def forward(params: ParamSet, image: Tensor, config: ViTConfig) -> Tensor:
    """Class logits (shape ``[classes]``) for a single image."""
    return reshape(_logits_row(params, image, config), (config.classes,))


def forward_batch(params: ParamSet, images: list[Tensor], config: ViTConfig) -> Tensor:
    """Logits ``[batch, classes]`` for a list of images sharing one weight set."""
    if not images:
        raise ShapeError("forward_batch needs at least one image")
    return concat_rows([_logits_row(params, img, config) for img in images])


def mhsa_flops(h: int, w: int, c: int) -> int:
    """Exact multiply count of the attention sublayer on an ``h*w`` token grid
    of width ``c``: ``3 h w c^2 + 2 h^2 w^2 c``. Arbitrary-precision ints, so
    the result never overflows."""
    for name, v in (("h", h), ("w", w), ("c", c)):
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
            raise ValueError(f"{name} must be a positive integer")
    h, w, c = int(h), int(w), int(c)
    return 3 * h * w * c * c + 2 * h * h * w * w * c


def save_checkpoint(path: str | Path, config: ViTConfig, params: ParamSet) -> None:
    """Write the model as one JSON document with lexicographic keys.

    Floats serialise as shortest round-trip decimals, so a load returns
    bit-identical tensors.
    """
    doc = {
        "config": asdict(config),
        "params": {
            name: {"shape": list(t.shape), "data": [float(v) for v in t.data]}
            for name, t in params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str | Path) -> tuple[ViTConfig, ParamSet]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    config = ViTConfig(**doc["config"])
    params = {
        name: Tensor(np.array(entry["data"]).reshape(entry["shape"]))
        for name, entry in doc["params"].items()
    }
    return config, ParamSet(params)
