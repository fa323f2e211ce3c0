"""Synthetic datasets with controllable in/out-of-distribution structure,
an IDX image loader, CSV loading, and the balanced train/val/pool split.

OOD generators label every sample -1 so that accidentally training on them
fails loudly in fit()'s label validation.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError
from .rng import derive_rng

OOD_LABEL = -1

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class Dataset:
    """Inputs stacked along axis 0; labels are class indices (or -1 for OOD)."""

    x: np.ndarray
    y: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DomainError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.name if name is None else name)


def gen_gaussian_clusters(
    num_classes: int, n_per_class: int, means, std: float, seed: int, name: str = "clusters"
) -> Dataset:
    """Labeled isotropic Gaussian blobs, shuffled, deterministic per seed."""
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] != num_classes:
        raise DomainError(f"need {num_classes} mean vectors, got shape {means.shape}")
    if len(np.unique(means, axis=0)) != num_classes:
        raise DomainError("cluster means must be distinct")
    if std <= 0:
        raise DomainError("cluster std must be positive")
    if n_per_class < 1:
        raise DomainError("n_per_class must be >= 1")
    rng = derive_rng(seed, "clusters", num_classes, n_per_class)
    xs = []
    ys = []
    for c in range(num_classes):
        xs.append(means[c][None, :] + std * rng.standard_normal((n_per_class, means.shape[1])))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    x = np.vstack(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], name)


def gen_ood_ring(
    radius: float,
    n: int,
    noise_std: float,
    seed: int,
    id_support_radius: float | None = None,
    name: str = "ring",
) -> Dataset:
    """Unlabeled ring of 2-D points around the origin.

    Radial noise is truncated at 3 standard deviations, so every point is
    guaranteed to lie at distance >= radius - 3*noise_std.
    """
    if radius <= 0:
        raise DomainError("ring radius must be positive")
    if n < 1:
        raise DomainError("ring size must be >= 1")
    if noise_std < 0:
        raise DomainError("noise_std must be >= 0")
    if id_support_radius is not None and radius <= id_support_radius:
        raise DomainError(
            f"ring radius {radius} must exceed the ID support radius {id_support_radius}"
        )
    rng = derive_rng(seed, "ring", n)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    offsets = np.zeros(n)
    if noise_std > 0:
        offsets = noise_std * rng.standard_normal(n)
        while True:  # truncate by resampling outliers; deterministic stream
            bad = np.abs(offsets) > 3.0 * noise_std
            if not np.any(bad):
                break
            offsets[bad] = noise_std * rng.standard_normal(int(bad.sum()))
    r = radius + offsets
    x = np.stack([r * np.cos(angles), r * np.sin(angles)], axis=1)
    return Dataset(x, np.full(n, OOD_LABEL, dtype=np.int64), name)


@dataclass(frozen=True)
class SplitSpec:
    """Half-open index ranges into one dataset, plus the balanced pick size."""

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    pool_range: tuple[int, int]
    m1: int
    seed: int = 0


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """(train, val, pool): train is a class-balanced m1-sample pick from the
    train range; val and pool are the full ranges, original order kept."""
    n = len(dataset)
    ranges = [spec.train_range, spec.val_range, spec.pool_range]
    for lo, hi in ranges:
        if not (0 <= lo <= hi <= n):
            raise DomainError(f"range ({lo}, {hi}) out of bounds for {n} samples")
    for i in range(3):
        for j in range(i + 1, 3):
            lo_i, hi_i = ranges[i]
            lo_j, hi_j = ranges[j]
            if max(lo_i, lo_j) < min(hi_i, hi_j):
                raise DomainError(f"ranges {ranges[i]} and {ranges[j]} overlap")
    classes = np.unique(dataset.y[dataset.y >= 0])
    C = len(classes)
    if C < 1:
        raise DomainError("dataset has no labeled samples")
    if spec.m1 < C or spec.m1 % C != 0:
        raise DomainError(f"m1={spec.m1} must be a positive multiple of {C} classes")
    per_class = spec.m1 // C
    lo, hi = spec.train_range
    rng = derive_rng(spec.seed, "split", lo, hi, spec.m1)
    picked: list[np.ndarray] = []
    for c in classes:
        candidates = np.arange(lo, hi)[dataset.y[lo:hi] == c]
        if len(candidates) < per_class:
            raise DomainError(f"class {c}: {len(candidates)} samples in train range, need {per_class}")
        picked.append(rng.choice(candidates, size=per_class, replace=False))
    train_idx = np.sort(np.concatenate(picked))
    train = dataset.subset(train_idx, "train")
    val = dataset.subset(np.arange(*spec.val_range), "val")
    pool = dataset.subset(np.arange(*spec.pool_range), "pool")
    return train, val, pool


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    imgs = _read_idx(images_path, IDX_MAGIC_IMAGES, ndim=3)
    labels = _read_idx(labels_path, IDX_MAGIC_LABELS, ndim=1)
    if imgs.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels"
        )
    n, h, w = imgs.shape
    x = imgs.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), "idx")


def _read_idx(path: str, want_magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != want_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{want_magic:08x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    if len(raw) != header_end + count:
        raise FormatError(
            f"{path}: payload has {len(raw) - header_end} bytes at offset {header_end}, expected {count}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_csv(path: str) -> Dataset:
    """CSV with header x0..xk,label; UTF-8, '.' decimal separator."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        k = len(header) - 1
        if k < 1 or header[-1] != "label" or header[:-1] != [f"x{i}" for i in range(k)]:
            raise FormatError(f"{path}: header must be x0..x{max(k - 1, 0)},label, got {header}")
        xs = []
        ys = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != k + 1:
                raise FormatError(f"{path}:{line_no}: expected {k + 1} columns, got {len(row)}")
            try:
                xs.append([float(v) for v in row[:-1]])
                ys.append(int(row[-1]))
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from exc
    if not xs:
        raise FormatError(f"{path}: no data rows")
    return Dataset(np.asarray(xs), np.asarray(ys), "csv")


def save_csv(dataset: Dataset, path: str) -> None:
    k = dataset.x.shape[1] if dataset.x.ndim == 2 else int(np.prod(dataset.x.shape[1:]))
    flat = dataset.x.reshape(len(dataset), k)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(k)] + ["label"])
        for row, label in zip(flat, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
