"""Data ingestion and batching.

Images are stored as raw 8-bit arrays and only normalized to float32 when
a batch is materialized. Loaders understand plain or gzip-compressed
IDX files (MNIST family) and CIFAR-10 binary batches; a deterministic
synthetic generator provides desk-scale data for oracle tests.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng as rngmod
from .errors import DataError, FormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 image bytes


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] uint8
    labels: np.ndarray  # [N] int64
    classes: int
    mean: np.ndarray = field(default=None)  # per-channel, in [0,1] units
    std: np.ndarray = field(default=None)
    augment: bool = False  # horizontal flip + pad-crop on shuffled batches

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")
        if self.mean is None:
            self.compute_normalization()

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    def compute_normalization(self) -> None:
        scaled = self.images.astype(np.float64) / 255.0
        self.mean = scaled.mean(axis=(0, 2, 3)).astype(np.float32)
        self.std = np.maximum(scaled.std(axis=(0, 2, 3)), 1e-3).astype(np.float32)

    def subset(self, idx: np.ndarray) -> "Dataset":
        # keep the parent's normalization so train/test stay comparable
        return Dataset(self.images[idx], self.labels[idx], self.classes,
                       mean=self.mean.copy(), std=self.std.copy())

    def use_normalization_of(self, other: "Dataset") -> None:
        self.mean = other.mean.copy()
        self.std = other.std.copy()

    def normalized(self, idx: np.ndarray | slice) -> np.ndarray:
        return self.normalize_array(self.images[idx])

    def normalize_array(self, images: np.ndarray) -> np.ndarray:
        x = images.astype(np.float32) / np.float32(255.0)
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]


def _open_maybe_gzip(path: str | Path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Parse a big-endian IDX image/label file pair (MNIST family)."""
    with _open_maybe_gzip(images_path) as fh:
        magic, n, h, w = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{images_path}: image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
        raw = fh.read(n * h * w)
        if len(raw) != n * h * w:
            raise FormatError(f"{images_path}: truncated image payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    with _open_maybe_gzip(labels_path) as fh:
        magic, nl = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{labels_path}: label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
        raw = fh.read(nl)
        if len(raw) != nl:
            raise FormatError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n != nl:
        raise DataError(f"image count {n} != label count {nl}")
    return Dataset(images.copy(), labels, classes=int(labels.max()) + 1 if n else 10)


def load_cifar_binary(directory: str | Path) -> Dataset:
    """CIFAR-10 binary batches: each record is one label byte followed by
    3072 image bytes (channel-major 32x32)."""
    directory = Path(directory)
    files = sorted(directory.glob("*.bin"))
    if not files:
        raise FormatError(f"no .bin batch files under {directory}")
    images, labels = [], []
    for path in files:
        blob = path.read_bytes()
        if len(blob) % CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images).copy(), np.concatenate(labels), classes=10)


def synthetic(classes: int, per_class: int, image_size: int, seed: int,
              channels: int = 1) -> Dataset:
    """Deterministic class-coded oriented gratings plus seeded pixel noise.

    High signal-to-noise by construction, so small networks can drive the
    training accuracy to ~100% (the overfit oracle used across the tests).
    """
    gen = rngmod.stream(seed, rngmod.SYNTH)
    n = classes * per_class
    yy, xx = np.meshgrid(np.linspace(0, 1, image_size), np.linspace(0, 1, image_size),
                         indexing="ij")
    images = np.empty((n, channels, image_size, image_size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    freqs = gen.uniform(1.5, 4.0, size=classes)
    phases = gen.uniform(0, 2 * np.pi, size=classes)
    for k in range(classes):
        theta = np.pi * k / classes
        wave = np.cos(2 * np.pi * freqs[k] * (xx * np.cos(theta) + yy * np.sin(theta)) + phases[k])
        lo, hi = k * per_class, (k + 1) * per_class
        noise = gen.standard_normal((per_class, channels, image_size, image_size))
        samples = 127.5 + 85.0 * wave[None, None] + 20.0 * noise
        images[lo:hi] = np.clip(samples, 0, 255).astype(np.uint8)
        labels[lo:hi] = k
    return Dataset(images, labels, classes=classes)


def _augment(images: np.ndarray, gen: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus zero-pad-and-crop, per sample."""
    n, _, h, w = images.shape
    flip = gen.random(n) < 0.5
    out = images.copy()
    out[flip] = out[flip][:, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = gen.integers(0, 2 * pad + 1, size=(n, 2))
    for i in range(n):
        oy, ox = offs[i]
        out[i] = padded[i, :, oy:oy + h, ox:ox + w]
    return out


def batches(ds: Dataset, batch_size: int, seed: int, shuffle: bool = True
            ) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (normalized float32 images, labels, source indices); the last
    partial batch is kept. Shuffle order is a seeded permutation, and the
    dataset's augmentation (when enabled) only applies to shuffled epochs."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    n = len(ds)
    gen = rngmod.stream(seed, rngmod.DATA)
    order = gen.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        imgs = ds.images[idx]
        if ds.augment and shuffle:
            imgs = _augment(imgs, gen)
        yield ds.normalize_array(imgs), ds.labels[idx], idx
