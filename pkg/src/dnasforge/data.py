"""Datasets: a synthetic Gaussian-blob generator and the CIFAR-10 binary format."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DatasetFormatError
from .rng import Rng

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, C, H, W), got shape {self.images.shape}")
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (len(self.images),):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx, provenance: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count,
                       provenance or self.provenance)

    def batches(self, batch_size: int, rng: Optional[Rng] = None) -> Iterator[tuple]:
        """Minibatches in a shuffled (if ``rng``) order; the last batch may be short."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for s in range(0, len(self), batch_size):
            idx = order[s:s + batch_size]
            yield self.images[idx], self.labels[idx]


def concat_datasets(a: Dataset, b: Dataset) -> Dataset:
    if a.shape != b.shape or a.class_count != b.class_count:
        raise ValueError("datasets disagree on image shape or class count")
    return Dataset(np.concatenate([a.images, b.images]), np.concatenate([a.labels, b.labels]),
                   a.class_count, a.provenance)


def blob_templates(classes: int, size: int, channels: int = 1) -> np.ndarray:
    """Noise-free class images: one Gaussian bump per class on a square grid of positions."""
    g = math.ceil(math.sqrt(classes))
    step = size / g
    width = step / 2.5
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((classes, channels, size, size))
    for c in range(classes):
        cy, cx = (c // g + 0.5) * step - 0.5, (c % g + 0.5) * step - 0.5
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width ** 2))
        out[c] = bump[None]
    return out


def synth_blobs(n: int, classes: int, size: int = 8, noise_sigma: float = 0.0, seed: int = 0,
                channels: int = 1) -> Dataset:
    """Balanced labelled blobs: class template plus i.i.d. Gaussian noise, clipped to [0, 1]."""
    if classes < 2:
        raise ValueError(f"synth_blobs needs at least 2 classes, got {classes}")
    if n < 1:
        raise ValueError("synth_blobs needs n >= 1")
    rng = Rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    images = blob_templates(classes, size, channels)[labels]
    if noise_sigma > 0:
        images = images + rng.normal(0.0, noise_sigma, images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes,
                   f"synth_blobs(n={n},classes={classes},size={size},noise={noise_sigma},seed={seed})")


def split_dataset(d: Dataset, ratio: float, seed: int) -> tuple:
    """Seeded shuffle, then the first ``round(ratio * n)`` items versus the rest."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    k = int(round(ratio * len(d)))
    if k == 0 or k == len(d):
        raise ValueError(f"split of {len(d)} items at ratio {ratio} leaves one side empty")
    order = Rng(seed).permutation(len(d))
    return d.subset(order[:k]), d.subset(order[k:])


# CIFAR-10 binary ----------------------------------------------------------------

def read_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> Dataset:
    if len(raw) == 0:
        raise DatasetFormatError(f"{source}: zero records")
    if len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(f"{source}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetFormatError(f"{source}: record {bad[0]} has label {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, f"cifar10:{os.path.basename(source)}")


def load_cifar10_bin(path) -> Dataset:
    """Read 3073-byte records: one label byte, then R, G and B 32x32 planes."""
    with open(path, "rb") as fh:
        return read_cifar10_bytes(fh.read(), str(path))


def cifar10_bytes(images, labels) -> bytes:
    """Encode images (uint8, or floats in [0, 1] scaled by 255) and labels as records."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[1:] != CIFAR_SHAPE or len(images) != len(labels):
        raise ValueError(f"need (n, 3, 32, 32) images and n labels, got {images.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise ValueError("labels must be in 0..9")
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    rec = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(len(labels), -1)
    return rec.tobytes()


def write_cifar10_bin(path, images, labels) -> None:
    with open(path, "wb") as fh:
        fh.write(cifar10_bytes(images, labels))


def cifar_subset(d: Dataset, classes: Sequence[int] = (0, 1), limit: int = 2000) -> Dataset:
    """First ``limit`` images of the given classes, relabelled 0..len(classes)-1."""
    keep = np.flatnonzero(np.isin(d.labels, classes))[:limit]
    if keep.size == 0:
        raise DatasetFormatError(f"no images of classes {list(classes)}")
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(l)] for l in d.labels[keep]])
    return Dataset(d.images[keep], labels, len(classes), f"{d.provenance}[classes={list(classes)}]")
