"""Binary checkpoint format.

Layout::

    b"SNVT"  version:u8  header_len:u64le  header:utf-8 JSON  blobs

The JSON header holds the encoder config, task set, pooling mode, dtype,
seed, step counter, optimizer metadata and a tensor table of
``{"name", "shape", "offset", "nbytes"}`` entries. Offsets are relative to
the first blob byte. Blobs are little-endian IEEE-754 float64 in table
order: model parameters first, then Adam moments as ``adam.m/<name>`` and
``adam.v/<name>``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .errors import ConfigError, ConfigMismatchError, CorruptCheckpointError
from .heads import TaskSet
from .model import SpatialNetViT
from .optim import AdamState

MAGIC = b"SNVT"
VERSION = 1
_PREFIX = len(MAGIC) + 1 + 8


@dataclass
class Checkpoint:
    version: int
    encoder: EncoderConfig
    tasks: TaskSet
    values: "OrderedDict[str, np.ndarray]"
    optimizer_state: AdamState | None
    seed: int
    step: int
    dtype: str = "float64"
    pooling: str = "mean"

    def model(self) -> SpatialNetViT:
        return SpatialNetViT(self.encoder, self.tasks, seed=self.seed,
                             dtype=np.dtype(self.dtype), values=self.values)


def encode_checkpoint(model: SpatialNetViT, optimizer_state: AdamState | None = None,
                      seed: int | None = None, step: int = 0) -> bytes:
    blobs = OrderedDict((name, p.data) for name, p in model.named_parameters())
    optimizer = None
    if optimizer_state is not None:
        optimizer = {"kind": "adam", "t": optimizer_state.t}
        for name in model.params:
            if name in optimizer_state.m:
                blobs[f"adam.m/{name}"] = optimizer_state.m[name]
                blobs[f"adam.v/{name}"] = optimizer_state.v[name]
    table, chunks, offset = [], [], 0
    for name, arr in blobs.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "encoder": model.config.to_dict(),
        "tasks": model.tasks.to_list(),
        "pooling": model.pooling,
        "dtype": model.dtype.name,
        "seed": model.seed if seed is None else seed,
        "step": step,
        "optimizer": optimizer,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(model: SpatialNetViT, path, optimizer_state: AdamState | None = None,
                    seed: int | None = None, step: int = 0) -> None:
    Path(path).write_bytes(encode_checkpoint(model, optimizer_state, seed, step))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) or data[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic, not a checkpoint file", 0)
    if len(data) < _PREFIX:
        raise CorruptCheckpointError("file ends inside the fixed prefix", len(data))
    version = data[4]
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported format version {version}", 4)
    (head_len,) = struct.unpack_from("<Q", data, 5)
    blob_start = _PREFIX + head_len
    if len(data) < blob_start:
        raise CorruptCheckpointError("file ends inside the JSON header", len(data))
    try:
        header = json.loads(data[_PREFIX:blob_start].decode("utf-8"))
        encoder = EncoderConfig.from_dict(header["encoder"])
        tasks = TaskSet.from_list(header["tasks"])
        table = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ConfigError) as exc:
        raise CorruptCheckpointError(f"malformed header ({exc})", _PREFIX) from exc

    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    end = blob_start
    for entry in table:
        start = blob_start + entry["offset"]
        stop = start + entry["nbytes"]
        shape = tuple(entry["shape"])
        if entry["nbytes"] != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"tensor {entry['name']} has inconsistent size", start)
        if stop > len(data):
            raise CorruptCheckpointError(f"file truncated inside tensor {entry['name']}", len(data))
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=entry["nbytes"] // 8,
                                              offset=start).reshape(shape).copy()
        end = max(end, stop)
    if end != len(data):
        raise CorruptCheckpointError(f"{len(data) - end} unexpected trailing bytes", end)

    dtype = header.get("dtype", "float64")
    values = OrderedDict((k, v.astype(dtype)) for k, v in arrays.items() if not k.startswith("adam."))
    state = None
    if header.get("optimizer"):
        m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: a for k, a in arrays.items() if k.startswith("adam.v/")}
        state = AdamState(m=m, v=v, t=int(header["optimizer"]["t"]))
    return Checkpoint(version, encoder, tasks, values, state, int(header["seed"]),
                      int(header["step"]), dtype, header.get("pooling", "mean"))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path, expect: EncoderConfig | None = None,
                    tasks: TaskSet | None = None) -> SpatialNetViT:
    """Rebuild the model stored at ``path``.

    When ``expect`` (or ``tasks``) is given, the stored configuration must
    match it exactly, otherwise :class:`ConfigMismatchError` is raised.
    """
    ckpt = read_checkpoint(path)
    if expect is not None and ckpt.encoder != expect:
        stored, wanted = ckpt.encoder.to_dict(), expect.to_dict()
        diffs = [f"{k}: stored {stored[k]!r} != expected {wanted[k]!r}"
                 for k in stored if stored[k] != wanted[k]]
        raise ConfigMismatchError("checkpoint encoder config differs: " + "; ".join(diffs))
    if tasks is not None and ckpt.tasks != tasks:
        raise ConfigMismatchError(f"checkpoint tasks {ckpt.tasks.ids} differ from {tasks.ids}")
    return ckpt.model()
