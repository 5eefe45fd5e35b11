"""Datasets: IDX binary loading, spatial patch partitioning, splits, and a
synthetic patch-classifiable dataset for desk-scale runs.

Pixels are scaled by 1/255 into [0, 1] with no mean-centering, so 0 stays the
"no signal" value that zero imputation of faulted features relies on.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IdxFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# Synthetic class means sit at 0.5 +/- this amplitude (per-pixel sign pattern).
SYNTH_AMPLITUDE = 0.12


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64 in [0, 1]
    labels: np.ndarray    # (n,) int64
    class_count: int

    def __len__(self):
        return self.features.shape[0]

    @property
    def feature_count(self):
        return self.features.shape[1]


@dataclass
class PartitionSpec:
    """Disjoint per-client feature index sets covering all d features.

    Client c (1-based, row-major over the patch grid) owns the columns in
    ``client_columns[c-1]``: the (side/g) x (side/g) pixel block flattened
    row-major within the block.
    """

    grid_side: int
    feature_count: int
    client_columns: list

    @property
    def client_count(self):
        return self.grid_side * self.grid_side

    def patch_dims(self):
        return [len(cols) for cols in self.client_columns]


def load_idx(images_path, labels_path, class_count=None) -> Dataset:
    """Parse big-endian IDX image/label files into a Dataset."""
    with open(images_path, "rb") as f:
        buf = f.read()
    if len(buf) < 16:
        raise IdxFormatError(f"{images_path}: truncated header ({len(buf)} bytes)")
    magic, n, rows, cols = struct.unpack(">iiii", buf[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    expected = 16 + n * rows * cols
    if len(buf) != expected:
        raise IdxFormatError(f"{images_path}: expected {expected} bytes, found {len(buf)}")
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    features = pixels.astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        lbuf = f.read()
    if len(lbuf) < 8:
        raise IdxFormatError(f"{labels_path}: truncated header ({len(lbuf)} bytes)")
    lmagic, ln = struct.unpack(">ii", lbuf[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    if len(lbuf) != 8 + ln:
        raise IdxFormatError(f"{labels_path}: expected {8 + ln} bytes, found {len(lbuf)}")
    if ln != n:
        raise IdxFormatError(f"label count {ln} does not match image count {n}")
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)

    if class_count is None:
        class_count = int(labels.max()) + 1 if ln else 0
    return Dataset(features, labels, class_count)


def save_idx(ds: Dataset, images_path, labels_path):
    """Export a dataset to the IDX layout (features quantized to uint8)."""
    n, d = ds.features.shape
    side = math.isqrt(d)
    if side * side != d:
        raise ConfigError(f"feature count {d} is not a square image")
    pixels = np.clip(np.round(ds.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, side, side))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def split_patches(feature_count: int, g: int) -> PartitionSpec:
    """Partition a side x side image into g x g square patches, one per client."""
    side = math.isqrt(feature_count)
    if side * side != feature_count:
        raise ConfigError(f"feature count {feature_count} is not a square image")
    if g < 1 or side % g != 0:
        raise ConfigError(f"image side {side} is not divisible by grid side {g}")
    block = side // g
    columns = []
    for idx in range(g * g):
        r0 = (idx // g) * block
        c0 = (idx % g) * block
        cols = np.array([(r0 + i) * side + (c0 + j)
                         for i in range(block) for j in range(block)], dtype=np.int64)
        columns.append(cols)
    return PartitionSpec(g, feature_count, columns)


def client_views(features: np.ndarray, spec: PartitionSpec):
    """Per-client feature matrices in client order."""
    if features.shape[1] != spec.feature_count:
        raise ConfigError(f"features have {features.shape[1]} columns, partition expects {spec.feature_count}")
    return [features[:, cols] for cols in spec.client_columns]


def make_splits(ds: Dataset, seed: int):
    """Seeded 80/20 train/validation split (60000 -> 48000/12000).

    The permutation comes from numpy's PCG64 generator, which is stable
    across platforms for a fixed seed.
    """
    n = len(ds)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    order = rng.permutation(n)
    n_train = (4 * n) // 5
    tr, va = order[:n_train], order[n_train:]
    train = Dataset(ds.features[tr], ds.labels[tr], ds.class_count)
    val = Dataset(ds.features[va], ds.labels[va], ds.class_count)
    return train, val


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    y = np.zeros((labels.shape[0], class_count), dtype=np.float64)
    y[np.arange(labels.shape[0]), labels] = 1.0
    return y


def synth_dataset(n: int, classes: int, g: int, seed: int, noise: float) -> Dataset:
    """Synthetic 28x28 dataset: one fixed mean image per class (a seeded
    per-pixel sign pattern around 0.5, so every patch carries class signal),
    plus Gaussian noise clipped to [0, 1].

    At noise 0 a nearest-mean classifier is exact; at noise 0.3 the class
    means are separated widely enough that a full-feature linear probe
    exceeds 95% accuracy.
    """
    if classes < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    side = 28
    if g < 1 or side % g != 0:
        raise ConfigError(f"grid side {g} does not divide image side {side}")
    d = side * side
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    patterns = rng.choice(np.array([-1.0, 1.0]), size=(classes, d))
    means = 0.5 + SYNTH_AMPLITUDE * patterns
    labels = rng.integers(0, classes, size=n)
    features = means[labels]
    if noise > 0:
        features = features + noise * rng.standard_normal((n, d))
    features = np.clip(features, 0.0, 1.0)
    return Dataset(features, labels.astype(np.int64), classes)


def synth_class_means(classes: int, seed: int) -> np.ndarray:
    """The mean images used by synth_dataset, for oracle checks."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    patterns = rng.choice(np.array([-1.0, 1.0]), size=(classes, 28 * 28))
    return 0.5 + SYNTH_AMPLITUDE * patterns
