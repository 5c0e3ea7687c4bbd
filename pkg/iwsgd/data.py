"""
Datasets: seeded synthetic generators and an IDX image/label loader.
"""

import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import IdxCountMismatchError, IdxMagicError, IdxTruncatedError, LabelRangeError
from .ndcore import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRAIN_FRACTION = 0.70
VALIDATION_FRACTION = 0.15


@dataclass
class Split:
    """Features [n x d] and integer class labels [n]."""

    features: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"features {self.features.shape} and labels {self.labels.shape} do not describe the same rows"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class Dataset:
    """Train, validation and test splits plus metadata."""

    train: Split
    validation: Split
    test: Split
    dim: int
    num_classes: int
    provenance: str

    def __post_init__(self):
        for name, split in self.splits().items():
            if split.features.shape[1] != self.dim:
                raise ValueError(f"{name} split has width {split.features.shape[1]}, expected {self.dim}")
            if len(split) and (split.labels.min() < 0 or split.labels.max() >= self.num_classes):
                raise LabelRangeError(f"{name} split has labels outside [0, {self.num_classes})", self.num_classes)
            if not np.all(np.isfinite(split.features)):
                raise ValueError(f"{name} split has non-finite features")

    def splits(self) -> Dict[str, Split]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def split(self, name: str) -> Split:
        try:
            return self.splits()[name]
        except KeyError:
            raise ValueError(f"Unknown split: {name}") from None


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def stratified_split(
    features: Tensor,
    labels: np.ndarray,
    num_classes: int,
    rng: np.random.Generator
) -> Tuple[Split, Split, Split]:
    """Split 70/15/15 per class, then shuffle each split.

    Args:
        features: All rows
        labels: All labels
        num_classes: Number of classes
        rng: Generator for the shuffles

    Returns:
        (train, validation, test)
    """
    parts = ([], [], [])
    for c in range(num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = _round_half_up(TRAIN_FRACTION * idx.size)
        n_val = _round_half_up(VALIDATION_FRACTION * idx.size)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    splits = []
    for chunks in parts:
        idx = rng.permutation(np.concatenate(chunks))
        splits.append(Split(features[idx], labels[idx]))
    return tuple(splits)


def gen_gaussian_blobs(
    n_per_class: int,
    num_classes: int,
    dim: int,
    radius: float,
    sigma: float,
    seed: int
) -> Dataset:
    """Isotropic Gaussian classes around centers on a circle of the given radius.

    Class c is centered at radius * (cos(2 pi c / K), sin(2 pi c / K), 0, ..., 0).

    Args:
        n_per_class: Examples per class
        num_classes: Number of classes K
        dim: Feature dimension
        radius: Distance of every center from the origin
        sigma: Standard deviation of the per-coordinate noise
        seed: Generator seed

    Returns:
        Dataset with a stratified 70/15/15 split
    """
    if n_per_class <= 0 or num_classes <= 0 or dim <= 0:
        raise ValueError("n_per_class, num_classes and dim must be positive")
    if dim == 1 and num_classes > 2:
        raise ValueError("dim must be at least 2 for more than two classes")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    if dim > 1:
        centers[:, 1] = radius * np.sin(angles)

    labels = np.repeat(np.arange(num_classes), n_per_class)
    features = centers[labels] + sigma * rng.standard_normal((labels.size, dim))
    train, validation, test = stratified_split(features, labels, num_classes, rng)
    provenance = (
        f"blobs(n_per_class={n_per_class}, num_classes={num_classes}, dim={dim}, "
        f"radius={radius}, sigma={sigma}, seed={seed})"
    )
    return Dataset(train, validation, test, dim, num_classes, provenance)


def gen_two_spirals(n_per_class: int, sigma: float, turns: float, seed: int) -> Dataset:
    """Two interleaved spirals in the plane; class 1 is class 0 rotated by pi.

    Args:
        n_per_class: Examples per class
        sigma: Standard deviation of additive noise
        turns: Number of revolutions of each arm
        seed: Generator seed

    Returns:
        Dataset with a stratified 70/15/15 split
    """
    if n_per_class <= 0:
        raise ValueError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.05, 1.0, n_per_class)
    angle = 2.0 * np.pi * turns * t
    arm = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    features = np.concatenate([arm, -arm]) + sigma * rng.standard_normal((2 * n_per_class, 2))
    labels = np.repeat(np.arange(2), n_per_class)
    train, validation, test = stratified_split(features, labels, 2, rng)
    provenance = f"spirals(n_per_class={n_per_class}, sigma={sigma}, turns={turns}, seed={seed})"
    return Dataset(train, validation, test, 2, 2, provenance)


def _read(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _header(raw: bytes, magic: int, ndims: int, path: str) -> Tuple[int, ...]:
    if len(raw) < 4:
        raise IdxTruncatedError("file too short for a magic number", path)
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxMagicError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", path)
    if len(raw) < 4 + 4 * ndims:
        raise IdxTruncatedError("file too short for its dimension header", path)
    return struct.unpack(f">{ndims}I", raw[4:4 + 4 * ndims])


def load_idx(images_path: str, labels_path: str, limit: Optional[int] = None) -> Split:
    """Load an IDX image file and its label file.

    Args:
        images_path: Path of the images file (magic 0x00000803)
        labels_path: Path of the labels file (magic 0x00000801)
        limit: Take only the first `limit` records

    Returns:
        Split with pixels scaled into [0, 1]

    Raises:
        IdxMagicError: Wrong magic number
        IdxTruncatedError: File shorter than its header declares
        IdxCountMismatchError: Image and label counts differ
    """
    image_raw = _read(images_path)
    label_raw = _read(labels_path)
    count, rows, cols = _header(image_raw, IDX_IMAGES_MAGIC, 3, images_path)
    (label_count,) = _header(label_raw, IDX_LABELS_MAGIC, 1, labels_path)
    if count != label_count:
        raise IdxCountMismatchError(f"{count} images but {label_count} labels", images_path)

    pixels = rows * cols
    image_body = image_raw[16:]
    label_body = label_raw[8:]
    if len(image_body) < count * pixels:
        raise IdxTruncatedError(f"expected {count * pixels} pixel bytes, found {len(image_body)}", images_path)
    if len(label_body) < count:
        raise IdxTruncatedError(f"expected {count} label bytes, found {len(label_body)}", labels_path)

    n = count if limit is None else min(limit, count)
    images = np.frombuffer(image_body, dtype=np.uint8, count=n * pixels).reshape(n, pixels)
    labels = np.frombuffer(label_body, dtype=np.uint8, count=n)
    return Split(images / 255.0, labels.astype(np.int64))


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images [n x rows x cols] and labels [n] as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError(f"images {images.shape} and labels {labels.shape} do not describe the same records")
    for path in (images_path, labels_path):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_idx_dataset(
    train_images: str,
    train_labels: str,
    test_images: str,
    test_labels: str,
    limit: Optional[int] = None,
    num_classes: int = 10
) -> Dataset:
    """Train/test IDX pairs; validation is the last 15% of training records in file order."""
    train = load_idx(train_images, train_labels, limit)
    test = load_idx(test_images, test_labels, limit)
    n_val = _round_half_up(VALIDATION_FRACTION * len(train))
    cut = len(train) - n_val
    validation = Split(train.features[cut:], train.labels[cut:])
    train = Split(train.features[:cut], train.labels[:cut])
    provenance = f"idx(train={train_images}, test={test_images}, limit={limit})"
    return Dataset(train, validation, test, train.features.shape[1], num_classes, provenance)
