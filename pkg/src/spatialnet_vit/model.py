"""The full model: shared ViT encoder plus one head per task."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .encoder import (
    AttentionLayer,
    EncoderConfig,
    EncoderLayer,
    FeedForwardLayer,
    PatchEmbedder,
    run_encoder,
)
from .errors import ShapeError
from .heads import TaskHead, TaskSet, head_forward
from .tensor import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def parameter_shapes(config: EncoderConfig, tasks: TaskSet) -> "OrderedDict[str, tuple]":
    """Names and shapes of every learned tensor, in canonical order."""
    d = config.dim
    shapes = OrderedDict()
    shapes["embed.W_e"] = (config.patch_len, d)
    shapes["embed.b_e"] = (d,)
    if config.positional:
        shapes["embed.pos"] = (config.num_patches, d)
    for i in range(config.layers):
        for w in ("W_Q", "W_K", "W_V", "W_O"):
            shapes[f"layer{i}.attn.{w}"] = (d, d)
        shapes[f"layer{i}.ffn.W_1"] = (d, d)
        shapes[f"layer{i}.ffn.b_1"] = (d,)
        shapes[f"layer{i}.ffn.W_2"] = (d, d)
        shapes[f"layer{i}.ffn.b_2"] = (d,)
    for t in tasks:
        shapes[f"head.{t.id}.W"] = (d, t.outputs)
        shapes[f"head.{t.id}.b"] = (t.outputs,)
    return shapes


def init_parameters(config: EncoderConfig, tasks: TaskSet, seed: int = 0,
                    dtype=np.float64) -> "OrderedDict[str, np.ndarray]":
    """Scaled-uniform weights, zero biases and positional table."""
    rng = np.random.default_rng(seed)
    values = OrderedDict()
    for name, shape in parameter_shapes(config, tasks).items():
        if len(shape) == 2 and not name.endswith(".pos"):
            values[name] = xavier_uniform(rng, *shape).astype(dtype)
        else:
            values[name] = np.zeros(shape, dtype=dtype)
    return values


class SpatialNetViT:
    """ViT encoder shared by multi-task heads.

    Parameters are plain leaf tensors in :attr:`params`; the layer objects
    returned by :attr:`embedder`, :attr:`layers` and :attr:`heads` are views
    onto the same tensors.
    """

    pooling = "mean"

    def __init__(self, config: EncoderConfig, tasks: TaskSet, seed: int = 0,
                 dtype=np.float64, values=None):
        self.config = config
        self.tasks = tasks
        self.seed = seed
        self.dtype = np.dtype(dtype)
        if values is None:
            values = init_parameters(config, tasks, seed, self.dtype)
        shapes = parameter_shapes(config, tasks)
        if list(values) != list(shapes):
            raise ShapeError("parameter names do not match the configuration")
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, shape in shapes.items():
            arr = np.asarray(values[name], dtype=self.dtype)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)
        self._build_views()

    def _build_views(self):
        p = self.params
        self.embedder = PatchEmbedder(p["embed.W_e"], p["embed.b_e"], p.get("embed.pos"))
        self.layers = [
            EncoderLayer(
                AttentionLayer(*(p[f"layer{i}.attn.{w}"] for w in ("W_Q", "W_K", "W_V", "W_O"))),
                FeedForwardLayer(p[f"layer{i}.ffn.W_1"], p[f"layer{i}.ffn.b_1"],
                                 p[f"layer{i}.ffn.W_2"], p[f"layer{i}.ffn.b_2"]),
            )
            for i in range(self.config.layers)
        ]
        self.heads = OrderedDict(
            (t.id, TaskHead(t, p[f"head.{t.id}.W"], p[f"head.{t.id}.b"], self.pooling))
            for t in self.tasks
        )

    # -- parameters --------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, values) -> None:
        for name, p in self.params.items():
            p.assign(values[name])

    def num_scalars(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward -----------------------------------------------------------
    def _images(self, images) -> np.ndarray:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        return arr.astype(self.dtype, copy=False)

    def encode(self, images) -> Tensor:
        """``H x W x C`` -> ``N x D``, or ``B x H x W x C`` -> ``B x N x D``."""
        return run_encoder(self._images(images), self.config, self.embedder, self.layers)

    def forward(self, images) -> "OrderedDict[str, Tensor]":
        z = self.encode(images)
        return OrderedDict((tid, head_forward(z, head)) for tid, head in self.heads.items())

    __call__ = forward

    def predict(self, images) -> dict[str, np.ndarray]:
        """Hard predictions: class indices, and counts rounded to the nearest
        nonnegative integer."""
        out = {}
        for tid, pred in self.forward(images).items():
            if self.tasks.get(tid).kind == "classification":
                out[tid] = pred.data.argmax(axis=-1)
            else:
                out[tid] = round_count(pred.data)
        return out


def round_count(values) -> np.ndarray:
    return np.maximum(np.rint(np.asarray(values, dtype=float)), 0.0).astype(int)


def encode(image, model: SpatialNetViT) -> Tensor:
    return model.encode(image)
