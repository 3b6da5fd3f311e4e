"""Dataset ingestion (MNIST IDX, CIFAR-10 binary, synthetic) and batched
iteration order over (sample, transformation) pairs.

Loaders are bit-exact: pixels stay uint8 until the model boundary, where the
engine normalizes to [0, 1] floats.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, FormatError, TruncatedFileError

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 32 * 32 * 3

SAMPLE_MAJOR = "sample_major"
TRANSFORMATION_MAJOR = "transformation_major"


@dataclass
class Dataset:
    """n images (H x W x C uint8) with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None
    name: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be n x H x W x C, got {self.images.shape}")
        if len(self.images) < 1:
            raise EmptyDatasetError("dataset has no images")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise FormatError("label count does not match image count")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, n: int) -> "Dataset":
        """First min(n, len) samples; deterministic subsetting for runs."""
        n = min(n, len(self.images))
        labels = self.labels[:n] if self.labels is not None else None
        return Dataset(self.images[:n], labels, self.name)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

def _read_exact(f, nbytes: int, path) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise TruncatedFileError(f"{path}: expected {nbytes} more bytes, got {len(data)}")
    return data


def load_mnist_idx(images_path, labels_path=None) -> Dataset:
    """Parse big-endian IDX image (and optionally label) files."""
    images_path = Path(images_path)
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != MNIST_IMAGE_MAGIC:
            raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
        payload = _read_exact(f, n * rows * cols, images_path)
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols, 1)

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        with open(labels_path, "rb") as f:
            magic, n_labels = struct.unpack(">II", _read_exact(f, 8, labels_path))
            if magic != MNIST_LABEL_MAGIC:
                raise FormatError(f"{labels_path}: bad label magic 0x{magic:08x}")
            labels = np.frombuffer(_read_exact(f, n_labels, labels_path), dtype=np.uint8)
        if n_labels != n:
            raise FormatError(f"label count {n_labels} != image count {n}")
    return Dataset(images, labels, name="mnist")


def load_cifar10_binary(directory, split: str = "test") -> Dataset:
    """Parse CIFAR-10 binary batches: 1 label byte + 3072 channel-planar
    RGB pixel bytes per record."""
    directory = Path(directory)
    if split == "test":
        files = [directory / "test_batch.bin"]
    elif split == "train":
        files = sorted(directory.glob("data_batch_*.bin"))
    else:
        raise ValueError(f"unknown split {split!r}")
    if not files or not all(f.exists() for f in files):
        raise FormatError(f"{directory}: missing CIFAR-10 {split} batch files")

    images, labels = [], []
    for path in files:
        blob = path.read_bytes()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
            raise FormatError(f"{path}: size {len(blob)} is not a multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].copy())
        pix = records[:, 1:].reshape(-1, 3, 32, 32)
        images.append(np.transpose(pix, (0, 2, 3, 1)).copy())
    return Dataset(np.concatenate(images), np.concatenate(labels), name="cifar10")


def synthetic_dataset(n: int, height: int, width: int, channels: int, seed: int) -> Dataset:
    """Seeded images mixing a random linear gradient, Gaussian blobs and
    noise, so downstream activations are non-degenerate.

    Per-image intensity and structure vary heavily (lognormal dynamic range,
    0-4 blobs), giving the sample axis realistic cross-sample variance.
    """
    if n < 1:
        raise EmptyDatasetError("synthetic_dataset needs n >= 1")
    if height < 2 or width < 2 or channels < 1:
        raise ValueError("synthetic_dataset dims must be >= 2 (spatial) and >= 1 (channels)")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)

    images = np.empty((n, height, width, channels), dtype=np.uint8)
    for i in range(n):
        intensity = rng.lognormal(0.0, 0.8)
        top = 255.0 * min(1.0, 0.25 + intensity / 4.0)
        for c in range(channels):
            gx, gy = rng.uniform(-1, 1, size=2)
            img = (gx * xx + gy * yy) * rng.uniform(0.2, 1.5)
            for _ in range(rng.integers(0, 5)):
                cy, cx = rng.uniform(0.05, 0.95, size=2)
                sigma = rng.uniform(0.05, 0.35)
                amp = rng.uniform(0.3, 2.5)
                img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            img += rng.normal(0.0, 0.05, size=img.shape)
            lo, hi = img.min(), img.max()
            images[i, :, :, c] = np.round(
                (img - lo) / max(hi - lo, 1e-12) * top
            ).astype(np.uint8)
    return Dataset(images, None, name=f"synthetic:{n}x{height}x{width}x{channels}@{seed}")


# ---------------------------------------------------------------------------
# Iteration order
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    """Enumerates every (sample, transformation) pair exactly once, grouped
    into batches of at most ``batch_size`` pairs.

    sample-major visits each sample's transformations contiguously (row-wise
    access, feeds TV/TD); transformation-major is the column-wise transpose
    (feeds SV/SD and the ANOVA group statistics).
    """

    sample_count: int
    batch_size: int
    order: str = SAMPLE_MAJOR

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.order not in (SAMPLE_MAJOR, TRANSFORMATION_MAJOR):
            raise ValueError(f"unknown order {self.order!r}")

    def pairs(self, transformation_count: int):
        if self.order == SAMPLE_MAJOR:
            for i in range(self.sample_count):
                for j in range(transformation_count):
                    yield i, j
        else:
            for j in range(transformation_count):
                for i in range(self.sample_count):
                    yield i, j

    def batches(self, transformation_count: int):
        batch = []
        for pair in self.pairs(transformation_count):
            batch.append(pair)
            if len(batch) == self.batch_size:
                yield batch
                batch = []
        if batch:
            yield batch
