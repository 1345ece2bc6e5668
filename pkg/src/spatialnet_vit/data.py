"""Images, manifests, in-memory datasets and the synthetic generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderConfig, preset_config
from .errors import (
    ConfigError,
    ImageDimensionError,
    ImageFormatError,
    ManifestError,
    TruncatedImageError,
)
from .heads import TaskSet, TaskSpec

SPLITS = ("train", "val", "test")
_WHITESPACE = b" \t\r\n\v\f"


# -- PPM / PGM -----------------------------------------------------------------

def _read_header(data: bytes) -> tuple[bytes, list[int], int]:
    """Parse magic + width/height/maxval; return them and the payload offset."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected binary PGM (P5) or PPM (P6)")
    pos, values = 2, []
    while len(values) < 3:
        while pos < len(data) and data[pos] in _WHITESPACE:
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"malformed header near byte {start}")
        values.append(int(data[start:pos]))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise TruncatedImageError("header is not followed by pixel data", pos + 1)
    return magic, values, pos + 1


def load_image(path, expected_shape: Sequence[int] | None = None) -> np.ndarray:
    """Decode an 8-bit binary PGM/PPM into an ``H x W x C`` array in [0, 1]."""
    data = Path(path).read_bytes()
    magic, (width, height, maxval), offset = _read_header(data)
    channels = 1 if magic == b"P5" else 3
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images with maxval 255 are supported, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: empty image {width}x{height}")
    shape = (height, width, channels)
    if expected_shape is not None and tuple(expected_shape) != shape:
        raise ImageDimensionError(f"{path}: image is {shape}, expected {tuple(expected_shape)}")
    end = offset + height * width * channels
    if len(data) < end:
        raise TruncatedImageError(f"{path}: payload has {len(data) - offset} bytes, "
                                  f"needs {end - offset}", end)
    pixels = np.frombuffer(data, dtype=np.uint8, count=end - offset, offset=offset)
    return pixels.reshape(shape) / 255.0


def encode_image(pixels) -> bytes:
    arr = np.asarray(pixels, dtype=float)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise ImageFormatError(f"cannot write array of shape {arr.shape} as PGM/PPM")
    h, w, c = arr.shape
    raw = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raw.tobytes()


def write_image(path, pixels) -> None:
    """Write values in [0, 1] as 8-bit PGM (1 channel) or PPM (3 channels)."""
    Path(path).write_bytes(encode_image(pixels))


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class ManifestSample:
    id: str
    image: str
    split: str
    targets: dict = field(default_factory=dict)
    captions: list = field(default_factory=list)
    questions: list = field(default_factory=list)


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    split: str
    encoder: EncoderConfig
    tasks: TaskSet
    samples: tuple[ManifestSample, ...]
    root: Path = Path(".")

    def samples_in(self, split: str) -> list[ManifestSample]:
        return [s for s in self.samples if s.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for sample in self.samples:
            counts[sample.split] += 1
        return counts

    def image_path(self, sample: ManifestSample) -> Path:
        return self.root / sample.image

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "encoder": self.encoder.to_dict(),
            "tasks": self.tasks.to_list(),
            "samples": [_sample_dict(s, self.split) for s in self.samples],
        }


def _sample_dict(s: ManifestSample, default_split: str) -> dict:
    d = {"id": s.id, "image": s.image, "targets": dict(s.targets)}
    if s.split != default_split:
        d["split"] = s.split
    if s.captions:
        d["captions"] = list(s.captions)
    if s.questions:
        d["questions"] = list(s.questions)
    return d


def _valid_target(task: TaskSpec, value) -> bool:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    if task.kind == "classification":
        return float(value).is_integer() and 0 <= value < task.classes
    return np.isfinite(value)


def parse_manifest(doc: Mapping, root=".", check_files: bool = True) -> DatasetManifest:
    """Validate a manifest document (already decoded from JSON)."""
    for key in ("name", "split", "encoder", "tasks", "samples"):
        if key not in doc:
            raise ManifestError(f"manifest is missing field {key!r}")
    default_split = doc["split"]
    if default_split not in SPLITS + ("all",):
        raise ManifestError(f"unknown split {default_split!r}")
    try:
        encoder = EncoderConfig.from_dict(doc["encoder"])
        tasks = TaskSet.from_list(doc["tasks"])
    except ConfigError as exc:
        raise ManifestError(f"invalid configuration: {exc}") from exc
    entries = doc["samples"]
    if not entries:
        raise ManifestError("manifest lists no samples")
    root = Path(root)

    samples, unknown, bad, missing = [], [], [], []
    seen: dict[str, str] = {}
    dupes, overlap = [], []
    for entry in entries:
        sid = str(entry["id"])
        split = entry.get("split", default_split)
        if split not in SPLITS:
            raise ManifestError(f"sample {sid!r} has invalid split {split!r}")
        if sid in seen:
            (dupes if seen[sid] == split else overlap).append(sid)
        seen.setdefault(sid, split)
        targets = dict(entry.get("targets", {}))
        for tid, value in targets.items():
            if tid not in tasks:
                unknown.append(f"{sid}:{tid}")
            elif not _valid_target(tasks.get(tid), value):
                bad.append(f"{sid}:{tid}={value!r}")
        if check_files and not (root / entry["image"]).is_file():
            missing.append(entry["image"])
        samples.append(ManifestSample(sid, entry["image"], split, targets,
                                      list(entry.get("captions", [])),
                                      list(entry.get("questions", []))))
    if dupes:
        raise ManifestError("duplicate sample ids", sorted(set(dupes)))
    if overlap:
        raise ManifestError("sample ids appear in more than one split", sorted(set(overlap)))
    if unknown:
        raise ManifestError("targets reference unknown task ids", unknown)
    if bad:
        raise ManifestError("targets do not fit their task kind", bad)
    if missing:
        raise ManifestError("image files not found", missing)
    return DatasetManifest(doc["name"], default_split, encoder, tasks, tuple(samples), root)


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    return parse_manifest(doc, root=path.parent, check_files=check_files)


def write_manifest(manifest: DatasetManifest, path) -> None:
    text = json.dumps(manifest.to_dict(), indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def stratified_split(labels, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list[str]:
    """Assign train/val/test per class in the given proportions."""
    labels = np.asarray(labels)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    out = np.empty(len(labels), dtype=object)
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        out[idx[:n_train]] = "train"
        out[idx[n_train:n_train + n_val]] = "val"
        out[idx[n_train + n_val:]] = "test"
    return list(out)


# -- in-memory datasets --------------------------------------------------------

@dataclass
class Dataset:
    """Images stacked as ``n x H x W x C`` with one target column per task.

    Missing labels are NaN.
    """

    ids: list[str]
    images: np.ndarray
    targets: dict[str, np.ndarray]

    def __post_init__(self):
        n = len(self.ids)
        if self.images.shape[0] != n or any(len(v) != n for v in self.targets.values()):
            raise ValueError("ids, images and targets must have the same length")

    def __len__(self):
        return len(self.ids)

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=int)
        return Dataset([self.ids[i] for i in indices], self.images[indices],
                       {k: v[indices] for k, v in self.targets.items()})


def load_dataset(manifest: DatasetManifest, split: str | None = None) -> Dataset:
    samples = manifest.samples if split is None else manifest.samples_in(split)
    if not samples:
        raise ManifestError(f"no samples in split {split!r}")
    shape = manifest.encoder.image_shape
    images = np.stack([load_image(manifest.image_path(s), shape) for s in samples])
    targets = {
        t.id: np.array([float(s.targets.get(t.id, np.nan)) for s in samples])
        for t in manifest.tasks
    }
    return Dataset([s.id for s in samples], images, targets)


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Class k has background level (k + 0.5) / K; the count task places m
    fully bright patch-aligned blocks."""

    seed: int = 0
    height: int = 16
    width: int = 16
    channels: int = 1
    patch: int = 4
    classes: int = 3
    count_range: tuple[int, int] = (0, 3)
    noise: float = 0.1
    n_train: int = 300
    n_test: int = 60

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if not 0 <= self.noise < 0.5:
            raise ConfigError(f"noise must lie in [0, 0.5), got {self.noise}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError("image size must be a multiple of the patch size")
        lo, hi = self.count_range
        cells = (self.height // self.patch) * (self.width // self.patch)
        if not 0 <= lo <= hi <= cells:
            raise ConfigError(f"count range {self.count_range} must lie within [0, {cells}]")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("need n_train >= 1 and n_test >= 0")

    @property
    def class_levels(self) -> np.ndarray:
        return (np.arange(self.classes) + 0.5) / self.classes

    def tasks(self) -> TaskSet:
        return TaskSet([TaskSpec("class", "classification", self.classes),
                        TaskSpec("count", "regression")])

    def encoder(self, preset: str = "desk") -> EncoderConfig:
        return preset_config(preset, self.height, self.width, self.channels, patch=self.patch)


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    ids: list[str]
    splits: list[str]
    images: np.ndarray
    labels: np.ndarray
    counts: np.ndarray

    def dataset(self, split: str | None = None) -> Dataset:
        idx = [i for i, s in enumerate(self.splits) if split is None or s == split]
        targets = {"class": self.labels[idx].astype(float), "count": self.counts[idx].astype(float)}
        return Dataset([self.ids[i] for i in idx], self.images[idx], targets)

    def manifest(self, root=".", preset: str = "desk") -> DatasetManifest:
        samples = tuple(
            ManifestSample(sid, f"images/{sid}.pgm" if self.spec.channels == 1 else f"images/{sid}.ppm",
                           split, {"class": int(label), "count": int(count)})
            for sid, split, label, count in zip(self.ids, self.splits, self.labels, self.counts)
        )
        return DatasetManifest(f"synthetic-seed{self.spec.seed}", "all",
                               self.spec.encoder(preset), self.spec.tasks(), samples, Path(root))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Deterministic images for the class + count tasks.

    Returned pixels are unquantised floats; files written by
    :func:`write_synthetic` are 8-bit.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_test
    p = spec.patch
    gh, gw = spec.height // p, spec.width // p
    labels = rng.permutation(np.arange(n) % spec.classes)
    lo, hi = spec.count_range
    counts = rng.integers(lo, hi + 1, size=n)
    levels = spec.class_levels

    images = np.empty((n, spec.height, spec.width, spec.channels))
    for i in range(n):
        img = np.full((spec.height, spec.width, spec.channels), levels[labels[i]])
        if spec.noise > 0:
            img += rng.uniform(-spec.noise, spec.noise, size=img.shape)
            np.clip(img, 0.0, 1.0, out=img)
        for cell in rng.choice(gh * gw, size=counts[i], replace=False):
            r, c = divmod(int(cell), gw)
            img[r * p:(r + 1) * p, c * p:(c + 1) * p, :] = 1.0
        images[i] = img
    ids = [f"s{i:05d}" for i in range(n)]
    splits = ["train"] * spec.n_train + ["test"] * spec.n_test
    return SyntheticData(spec, ids, splits, images, labels, counts)


def write_synthetic(spec: SyntheticSpec, out_dir, preset: str = "desk") -> DatasetManifest:
    """Write images and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(spec)
    manifest = data.manifest(out, preset)
    for sample, pixels in zip(manifest.samples, data.images):
        write_image(out / sample.image, pixels)
    write_manifest(manifest, out / "manifest.json")
    return manifest


def count_bright_blocks(image, patch: int) -> int:
    """Number of patch-grid cells whose pixels are all exactly 1."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    cells = img.reshape(h // patch, patch, w // patch, patch, -1)
    return int(np.all(cells == 1.0, axis=(1, 3, 4)).sum())

