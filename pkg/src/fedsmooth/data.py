"""Datasets: IDX image files and synthetic Gaussian blobs, features in [0, 1]."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedsmooth.errors import ConfigError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError(f"features must be a non-empty matrix, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"{features.shape[0]} feature rows but labels of shape {labels.shape}")
        if not np.all(np.isfinite(features)) or features.min() < 0 or features.max() > 1:
            raise ValueError("features must be finite and lie in [0, 1]")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Rows and labels at ``indices``; the only row accessor training code uses."""
        indices = np.asarray(indices, dtype=np.int64)
        return self.features[indices], self.labels[indices]

    def subset(self, indices) -> "Dataset":
        x, y = self.take(indices)
        return Dataset(x, y, self.num_classes)


def _read_header(data: bytes, path, expected_magic: int, ndims: int) -> tuple[int, ...]:
    if len(data) < 4:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: expected magic 0x{expected_magic:08x}, got 0x{magic:08x}")
    need = 4 * (1 + ndims)
    if len(data) < need:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes, need {need})")
    return struct.unpack(f">{ndims}I", data[4:need])


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load IDX images and labels, plain or gzip-compressed; pixels scaled to [0, 1]."""
    images = _read_bytes(images_path)
    labels = _read_bytes(labels_path)
    count, rows, cols = _read_header(images, images_path, IMAGES_MAGIC, 3)
    (label_count,) = _read_header(labels, labels_path, LABELS_MAGIC, 1)
    if count != label_count:
        raise FormatError(f"{images_path} holds {count} images but {labels_path} holds {label_count} labels")
    pixels = images[16:]
    if len(pixels) != count * rows * cols:
        raise FormatError(f"{images_path}: expected {count * rows * cols} pixel bytes, got {len(pixels)}")
    if len(labels) - 8 != count:
        raise FormatError(f"{labels_path}: expected {count} label bytes, got {len(labels) - 8}")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols) / 255.0
    y = np.frombuffer(labels[8:], dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, max(num_classes, int(y.max()) + 1))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.tobytes())


def blob_centers(num_classes: int, dim: int, radius: float, seed: int) -> np.ndarray:
    """Class centers at ``0.5 + radius * u_c`` for unit directions ``u_c``.

    Directions are orthonormal when ``num_classes <= dim``. Centers are
    clipped into [0.05, 0.95] so they stay in the interior of the box.
    """
    rng = np.random.default_rng([seed, 0xB10B])
    g = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, _ = np.linalg.qr(g)
        directions = q.T
    else:
        directions = (g / np.linalg.norm(g, axis=0)).T
    return np.clip(0.5 + radius * directions, 0.05, 0.95)


def synth_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int,
                radius: float = 0.25, background: int = 0) -> Dataset:
    """``per_class`` samples around each class center, ordered by class.

    ``background`` appends that many always-zero features, like the blank
    border pixels of digit images.
    """
    if num_classes < 2 or dim < 1 or per_class < 1 or background < 0:
        raise ValueError("need num_classes >= 2, dim >= 1, per_class >= 1 and background >= 0")
    centers = blob_centers(num_classes, dim, radius, seed)
    rng = np.random.default_rng([seed, 0xDA7A])
    labels = np.repeat(np.arange(num_classes), per_class)
    x = np.clip(centers[labels] + spread * rng.standard_normal((labels.size, dim)), 0.0, 1.0)
    if background:
        x = np.hstack([x, np.zeros((labels.size, background))])
    return Dataset(x, labels, num_classes)


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    cut = int(np.floor(n * train_fraction))
    if cut == 0 or cut == n:
        raise ValueError(f"split of {n} rows at {train_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(order[:cut]), dataset.subset(order[cut:])


def require_classes(dataset: Dataset) -> None:
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ConfigError(f"class {int(missing[0])} has no examples in the dataset")
