"""Datasets: IDX reader/writer and a seeded synthetic bar-pattern generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class WrongMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.images[index], self.labels[index])

    def where(self, mask) -> "LabeledDataset":
        return self.subset(np.flatnonzero(mask))


def _open(path):
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as f:
        return f.read()


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    raw = _open(path)
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise WrongMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise WrongMagicError(f"{path}: magic 0x{magic:08x} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    n = int(np.prod(dims))
    if len(raw) - header < n:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - header} bytes, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    blob = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    blob += array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as f:
            f.write(blob)
    else:
        path.write_bytes(blob)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1], shape (N, 1, H, W)."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path} has {len(images)} images, {labels_path} has {len(labels)} labels")
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return LabeledDataset(x, labels.astype(np.int64))


def synth_dataset(seed: int, n_classes: int, n_per_class: int, size: int = 12,
                  noise: float = 0.15) -> LabeledDataset:
    """Class-conditional oriented bars with positional jitter and Gaussian noise.

    Class ``c`` draws a bar at angle ``pi * c / n_classes`` through a jittered
    centre. Samples are interleaved by class so any prefix is near-balanced.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) - (size - 1) / 2
    labels = np.tile(np.arange(n_classes), n_per_class)
    images = np.empty((len(labels), 1, size, size), dtype=np.float32)
    for n, c in enumerate(labels):
        theta = np.pi * c / n_classes + rng.normal(0, 0.04)
        cy, cx = rng.uniform(-size / 8, size / 8, 2)
        dist = np.abs((xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta))
        bar = np.clip(1.2 - dist, 0, 1)
        images[n, 0] = np.clip(bar + rng.normal(0, noise, bar.shape), 0, 1)
    return LabeledDataset(images, labels)


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int) -> tuple:
    idx = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(np.sort(idx[n_test:])), ds.subset(np.sort(idx[:n_test]))
