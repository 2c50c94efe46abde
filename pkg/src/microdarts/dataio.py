"""Synthetic texture data, the IDRT binary format and seeded splits."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .rng import SplitMix64

MAGIC = b"IDRT"
_HEADER = struct.Struct("<4sIIII")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"
    seed: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError(f"{self.images.shape[0]} images but {self.labels.size} labels")
        if self.labels.size and self.labels.min() < 0:
            raise InputError("negative label")

    def __len__(self):
        return self.labels.size

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def gen_synthetic(classes: int = 4, n_per_class: int = 100, size: int = 16, seed: int = 0,
                  channels: int = 1, noise: float = 0.1, phase_jitter: bool = True) -> Dataset:
    """Oriented sinusoidal gratings, one orientation/frequency pair per class.

    Each sample gets a random phase (so class means are flat and raw pixels are
    not linearly separable) plus Gaussian pixel noise, then is clipped to [0, 1].
    Samples are interleaved by class: sample ``i`` has label ``i % classes``.
    """
    if classes < 2:
        raise InputError("need at least 2 classes")
    if size < 8:
        raise InputError("image size must be at least 8")
    rng = SplitMix64(seed).fork("synthetic")
    n = classes * n_per_class
    labels = np.arange(n) % classes
    angles = np.pi * np.arange(classes) / classes
    freqs = 1.5 + (np.arange(classes) % 3)
    coords = np.arange(size) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    phases = rng.uniform(n, 0.0, 2 * np.pi) if phase_jitter else np.zeros(n)
    noise_field = rng.normal((n, channels, size, size), std=noise) if noise > 0 else 0.0
    a, f = angles[labels], freqs[labels]
    proj = xx[None] * np.cos(a)[:, None, None] + yy[None] * np.sin(a)[:, None, None]
    base = 0.5 + 0.4 * np.sin(2 * np.pi * f[:, None, None] * proj + phases[:, None, None])
    images = np.clip(base[:, None] + noise_field, 0.0, 1.0)
    return Dataset(images.astype(np.float32), labels, f"synthetic{classes}x{size}", seed)


def write_binary(path, dataset: Dataset) -> None:
    n, c, h, w = dataset.images.shape
    if dataset.labels.size and dataset.labels.max() > 0xFFFF:
        raise InputError("labels must fit in u16")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, c, h, w))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
        fh.write(dataset.labels.astype("<u2").tobytes())


def load_binary(path, classes: int | None = None) -> Dataset:
    """Parse an IDRT file; every length is validated exactly."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise InputError(f"{path}: header needs {_HEADER.size} bytes, file has {len(data)}")
    magic, n, c, h, w = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise InputError(f"{path}: bad magic {magic!r} at byte offset 0")
    pixels = n * c * h * w
    expected = _HEADER.size + 4 * pixels + 2 * n
    if len(data) != expected:
        raise InputError(f"{path}: expected {expected} bytes, got {len(data)}")
    offset = _HEADER.size
    images = np.frombuffer(data, dtype="<f4", count=pixels, offset=offset).reshape(n, c, h, w)
    offset += 4 * pixels
    labels = np.frombuffer(data, dtype="<u2", count=n, offset=offset).astype(np.int64)
    if classes is not None and n:
        bad = np.flatnonzero(labels >= classes)
        if bad.size:
            raise InputError(
                f"{path}: label {labels[bad[0]]} out of range [0, {classes}) "
                f"at byte offset {offset + 2 * bad[0]}"
            )
    return Dataset(images.astype(np.float32), labels, Path(path).stem)


def write_labels_csv(path, labels) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "label"])
        for i, y in enumerate(np.asarray(labels)):
            writer.writerow([i, int(y)])


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "label"]:
        raise InputError(f"{path}: expected header 'index,label'")
    out = np.empty(len(rows) - 1, dtype=np.int64)
    for lineno, row in enumerate(rows[1:], 2):
        try:
            i, y = int(row[0]), int(row[1])
        except (ValueError, IndexError) as exc:
            raise InputError(f"{path}: bad row at line {lineno}") from exc
        if i != lineno - 2:
            raise InputError(f"{path}: index {i} out of order at line {lineno}")
        out[i] = y
    return out


@dataclass
class Split:
    train_w: np.ndarray
    train_alpha: np.ndarray
    test: np.ndarray
    discretize: np.ndarray

    @property
    def train(self) -> np.ndarray:
        return np.concatenate([self.train_w, self.train_alpha])


def make_split(dataset, fractions=(0.4, 0.4, 0.2), seed: int = 0,
               discretize_fraction: float = 0.1) -> Split:
    """Seeded shuffle, then consecutive blocks for weights / alpha / test.

    The discretization subset is drawn from the two training blocks.
    """
    n = dataset if isinstance(dataset, int) else len(dataset)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-12:
        raise InputError(f"fractions must be three non-negative numbers summing to <= 1: {fractions}")
    sizes = [int(np.floor(f * n + 1e-9)) for f in fractions]
    for f, s, tag in zip(fractions, sizes, ("train_w", "train_alpha", "test")):
        if f > 0 and s == 0:
            raise InputError(f"{n} samples are too few for a non-empty {tag} part")
    rng = SplitMix64(seed).fork("split")
    perm = rng.permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    train_w, train_alpha, test = perm[:a], perm[a:b], perm[b:b + sizes[2]]
    train = np.concatenate([train_w, train_alpha])
    k = max(1, int(round(discretize_fraction * train.size))) if train.size else 0
    disc = np.sort(train[rng.fork("discretize").permutation(train.size)[:k]])
    return Split(train_w, train_alpha, test, disc)


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    tag: str = field(default="")


def batches(dataset: Dataset, indices, batch_size: int, seed: int = 0, epoch: int = 0,
            tag: str = "", shuffle: bool = True, drop_last: bool = True):
    """Split ``indices`` into tagged batches; order is a pure function of (seed, epoch, tag)."""
    indices = np.asarray(indices)
    if shuffle:
        indices = indices[SplitMix64(seed).fork(f"{tag}/{epoch}").permutation(indices.size)]
    n = indices.size
    stops = list(range(batch_size, n + 1, batch_size))
    if not drop_last or not stops:
        if not stops or stops[-1] != n:
            stops.append(n)
    out, start = [], 0
    for stop in stops:
        ids = indices[start:stop]
        if ids.size:
            out.append(Batch(dataset.images[ids], dataset.labels[ids], ids, tag))
        start = stop
    return out
