"""Dataset loading (IDX, CIFAR binary), batching, subsets and synthetic corpora."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
SYNTHETIC_KINDS = ("bars_stripes", "corner_blobs")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, W, H, C) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, W, H, C), got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"count mismatch: {self.images.shape[0]} images, {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.name)


class Batch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray

    def onehot(self, num_classes: int) -> np.ndarray:
        return np.stack([one_hot(y, num_classes) for y in self.labels])


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
    expected = count * rows * cols
    if len(raw) - 16 < expected:
        raise DataError(f"{path}: truncated, expected {expected} pixel bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX label header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
    if len(raw) - 8 < count:
        raise DataError(f"{path}: truncated, expected {count} label bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(
    images_path, labels_path, num_classes: int | None = None, label_offset: int = 0, name: str = ""
) -> Dataset:
    """Single-channel dataset from an IDX image/label file pair (optionally gzipped).

    ``label_offset`` is subtracted from every label (1 for EMNIST-letters).
    """
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.int64) - label_offset
    if pixels.shape[0] != labels.shape[0]:
        raise DataError(
            f"count mismatch: {pixels.shape[0]} images vs {labels.shape[0]} labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    images = (pixels.astype(np.float64) / 255.0)[..., None]
    return Dataset(images, labels, num_classes, name)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 ``(N, rows, cols)`` pixels and labels as an IDX pair."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()
    _write_maybe_gz(images_path, images)
    _write_maybe_gz(labels_path, label_bytes)


def _write_maybe_gz(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_cifar(paths: Sequence, num_classes: int = 10, name: str = "cifar10") -> Dataset:
    """CIFAR binary batches: 1 label byte then 1024 bytes per R, G, B plane."""
    chunks = []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD_BYTES:
            raise DataError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES))
    if not chunks:
        raise DataError("no CIFAR files given")
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    planes = records[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes, name)


def one_hot(label: int, num_classes: int) -> np.ndarray:
    if not 0 <= label < num_classes:
        raise DataError(f"label {label} out of range for {num_classes} classes")
    v = np.zeros(num_classes)
    v[label] = 1.0
    return v


def batch_iter(
    dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True
) -> Iterator[Batch]:
    """Mini-batches in a permutation fixed by ``(seed, epoch)``; the last one may be short."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield Batch(dataset.images[idx], dataset.labels[idx])


def subset(
    dataset: Dataset, n_per_class: int | None = None, total: int | None = None, seed: int = 0
) -> Dataset:
    """Seeded stratified (``n_per_class``) or uniform (``total``) subsample."""
    if (n_per_class is None) == (total is None):
        raise DataError("give exactly one of n_per_class or total")
    rng = np.random.default_rng(seed)
    if total is not None:
        if total > len(dataset):
            raise DataError(f"requested {total} samples, only {len(dataset)} available")
        return dataset.take(rng.permutation(len(dataset))[:total])
    picks = []
    for k in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == k)
        if members.size < n_per_class:
            raise DataError(
                f"class {k} has {members.size} samples, {n_per_class} requested"
            )
        picks.append(rng.permutation(members)[:n_per_class])
    idx = np.concatenate(picks)
    return dataset.take(idx[rng.permutation(idx.size)])


def _corner_template(label: int, dim: int) -> np.ndarray:
    img = np.zeros((dim, dim))
    half = dim // 2
    rows = slice(0, half) if label in (0, 1) else slice(dim - half, dim)
    cols = slice(0, half) if label in (0, 2) else slice(dim - half, dim)
    img[rows, cols] = 0.9
    return img


def _bars_template(label: int, dim: int) -> np.ndarray:
    phase = label // 2
    lines = (np.arange(dim) % 2 == phase).astype(np.float64) * 0.9
    img = np.tile(lines[:, None], (1, dim))
    return img if label % 2 == 0 else img.T


def synthetic_dataset(
    kind: str, size: int, image_dim: int = 8, num_classes: int = 4, seed: int = 0
) -> Dataset:
    """Balanced toy images with seeded Gaussian noise (sigma 0.1), clipped to [0, 1].

    ``corner_blobs``: a bright square in one of the four quadrants.
    ``bars_stripes``: horizontal bars (even classes) or vertical stripes (odd),
    class // 2 selecting the line phase.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}")
    if image_dim < 4:
        raise DataError("image_dim must be >= 4")
    if not 2 <= num_classes <= 4:
        raise DataError("synthetic datasets support 2 to 4 classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(size) % num_classes)
    template = _corner_template if kind == "corner_blobs" else _bars_template
    base = np.stack([template(int(y), image_dim) for y in labels]) if size else np.zeros(
        (0, image_dim, image_dim)
    )
    noisy = np.clip(base + rng.normal(0.0, 0.1, size=base.shape), 0.0, 1.0)
    return Dataset(noisy[..., None], labels, num_classes, kind)
