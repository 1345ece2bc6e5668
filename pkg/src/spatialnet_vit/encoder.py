"""Vision-transformer encoder: patches -> embeddings -> attention/FFN stack."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    normalize_rows,
    relu,
    softmax_rows,
    transpose,
)

SCALE_MODES = ("head", "model")


@dataclass(frozen=True)
class EncoderConfig:
    """Image geometry and transformer sizes.

    ``scale`` picks the width inside the attention denominator: ``"head"``
    divides scores by sqrt(D/h), ``"model"`` by sqrt(D).
    """

    height: int
    width: int
    channels: int
    patch: int
    dim: int
    layers: int
    heads: int
    positional: bool = True
    residual_norm: bool = True
    scale: str = "head"

    def __post_init__(self):
        for name in ("height", "width", "channels", "patch", "dim", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"image {self.height}x{self.width} is not divisible by patch size {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.scale not in SCALE_MODES:
            raise ConfigError(f"scale must be one of {SCALE_MODES}, got {self.scale!r}")

    @property
    def num_patches(self) -> int:
        return (self.height * self.width) // (self.patch * self.patch)

    @property
    def patch_len(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def scale_width(self) -> int:
        return self.head_dim if self.scale == "head" else self.dim

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


PRESETS = {
    "paper": dict(patch=16, dim=512, layers=12, heads=8),
    "desk": dict(patch=4, dim=16, layers=2, heads=2),
}

PRESET_IMAGES = {
    "paper": (256, 256, 3),
    "desk": (16, 16, 1),
}


def preset_config(name: str, height=None, width=None, channels=None, **overrides) -> EncoderConfig:
    """Encoder sizes for a named preset, with optional image size overrides."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    h, w, c = PRESET_IMAGES[name]
    kwargs = dict(PRESETS[name], height=height or h, width=width or w, channels=channels or c)
    kwargs.update(overrides)
    return EncoderConfig(**kwargs)


def with_preset(config: EncoderConfig, name: str) -> EncoderConfig:
    """Keep the image geometry of ``config`` but swap in a preset's sizes."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(config, **PRESETS[name])


# -- patches -----------------------------------------------------------------

def _image_array(image) -> np.ndarray:
    return image.data if isinstance(image, Tensor) else np.asarray(image, dtype=float)


def patchify(image, config: EncoderConfig) -> Tensor:
    """Split ``H x W x C`` (or a batch ``B x H x W x C``) into flattened patches.

    Patches follow the row-major patch grid; each one is flattened in
    (row, col, channel) order. Returns ``N x P*P*C`` (or ``B x N x P*P*C``).
    Images are treated as data, so no gradient flows back into them.
    """
    arr = _image_array(image)
    if arr.ndim not in (3, 4) or arr.shape[-3:] != config.image_shape:
        raise ShapeError(f"image shape {arr.shape} does not match config {config.image_shape}")
    p = config.patch
    gh, gw = config.height // p, config.width // p
    lead = arr.shape[:-3]
    x = arr.reshape(*lead, gh, p, gw, p, config.channels)
    x = np.moveaxis(x, -4, -3)
    return Tensor(x.reshape(*lead, gh * gw, config.patch_len), dtype=arr.dtype)


def unpatchify(patches, config: EncoderConfig) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    arr = _image_array(patches)
    if arr.shape[-2:] != (config.num_patches, config.patch_len):
        raise ShapeError(
            f"patches shape {arr.shape} does not match "
            f"{(config.num_patches, config.patch_len)}")
    p = config.patch
    gh, gw = config.height // p, config.width // p
    lead = arr.shape[:-2]
    x = arr.reshape(*lead, gh, gw, p, p, config.channels)
    x = np.swapaxes(x, -4, -3)
    return x.reshape(*lead, config.height, config.width, config.channels)


# -- layers ------------------------------------------------------------------

@dataclass
class PatchEmbedder:
    weight: Tensor       # (P*P*C) x D
    bias: Tensor         # D
    positions: Tensor | None = None  # N x D


@dataclass
class AttentionLayer:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor


@dataclass
class FeedForwardLayer:
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor


@dataclass
class EncoderLayer:
    attention: AttentionLayer
    ffn: FeedForwardLayer


def embed_patches(patches, embedder: PatchEmbedder) -> Tensor:
    patches = as_tensor(patches)
    if patches.shape[-1] != embedder.weight.shape[0]:
        raise ShapeError(
            f"patch length {patches.shape[-1]} does not match embedding rows "
            f"{embedder.weight.shape[0]}")
    z = add(matmul(patches, embedder.weight), embedder.bias)
    if embedder.positions is not None:
        z = add(z, embedder.positions)
    return z


def attention(z, layer: AttentionLayer, heads: int, scale_width: int | None = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over the patch rows.

    ``scale_width`` defaults to the per-head width D/h.
    """
    z = as_tensor(z)
    d = z.shape[-1]
    if d % heads:
        raise ConfigError(f"dim {d} is not divisible by {heads} heads")
    dk = d // heads
    scale = 1.0 / math.sqrt(scale_width or dk)
    q = matmul(z, layer.W_Q)
    k = matmul(z, layer.W_K)
    v = matmul(z, layer.W_V)
    outs = []
    for h in range(heads):
        cols = (Ellipsis, slice(h * dk, (h + 1) * dk))
        qh, kh, vh = q[cols], k[cols], v[cols]
        weights = softmax_rows(matmul(qh, transpose(kh)) * scale)
        outs.append(matmul(weights, vh))
    merged = outs[0] if heads == 1 else concat(outs, axis=-1)
    return matmul(merged, layer.W_O)


def ffn(x, layer: FeedForwardLayer) -> Tensor:
    """max(0, x W1 + b1) W2 + b2, applied to each row."""
    x = as_tensor(x)
    if x.shape[-1] != layer.W_1.shape[0]:
        raise ShapeError(f"ffn input width {x.shape[-1]} does not match W_1 {layer.W_1.shape}")
    hidden = relu(add(matmul(x, layer.W_1), layer.b_1))
    return add(matmul(hidden, layer.W_2), layer.b_2)


def encoder_layer(z: Tensor, layer: EncoderLayer, config: EncoderConfig) -> Tensor:
    if config.residual_norm:
        z = z + attention(normalize_rows(z), layer.attention, config.heads, config.scale_width)
        return z + ffn(normalize_rows(z), layer.ffn)
    z = attention(z, layer.attention, config.heads, config.scale_width)
    return ffn(z, layer.ffn)


def run_encoder(image, config: EncoderConfig, embedder: PatchEmbedder,
                layers: Sequence[EncoderLayer]) -> Tensor:
    """patchify -> embed -> L x (attention -> ffn); output ``N x D`` per image."""
    z = embed_patches(patchify(image, config), embedder)
    expected = (config.num_patches, config.dim)
    if z.shape[-2:] != expected:
        raise ShapeError(f"embedding produced {z.shape}, expected trailing {expected}")
    for layer in layers:
        z = encoder_layer(z, layer, config)
        if z.shape[-2:] != expected:
            raise ShapeError(f"encoder layer produced {z.shape}, expected trailing {expected}")
    if config.residual_norm and layers:
        z = normalize_rows(z)
    return z
