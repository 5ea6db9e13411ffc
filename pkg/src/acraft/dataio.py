"""Synthetic datasets, session splits, and the binary container format.

Features always live in the unit box [0, 1]^d as float64; labels are
contiguous class ids starting at 0.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np

# Binary container layout, little-endian:
#   magic "AFDS" | version u32 | n u64 | d u64 | class_count u32 | dtype u8
#   | features (n*d float64, or n*d u8 scaled by 1/255) | labels (n u32)
MAGIC = b"AFDS"
FORMAT_VERSION = 1
DTYPE_F64 = 0
DTYPE_U8 = 1

CLUSTER_SIGMA = 0.05  # per-coordinate std of every synthetic class cluster


class DatasetError(ValueError):
    """Base class for dataset container errors."""


class BadMagicError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class SplitError(ValueError):
    """Split parameters incompatible with the dataset."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix in [0,1]^d with integer class labels."""

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    class_count: int

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SessionEntry:
    """One incremental session: its new classes and their sample indices."""

    classes: tuple[int, ...]
    train_indices: np.ndarray  # ways * shots entries
    test_indices: np.ndarray


@dataclass(frozen=True)
class SessionSplit:
    """Base/incremental partition of a dataset.

    Incremental session i (1-based) introduces `ways` unseen classes with
    exactly `shots` training samples each; evaluation at session i uses the
    cumulative test pool of every class seen so far.
    """

    base_classes: tuple[int, ...]
    base_train_indices: np.ndarray
    base_test_indices: np.ndarray
    sessions: tuple[SessionEntry, ...]
    ways: int
    shots: int

    def test_pool(self, session_index: int) -> np.ndarray:
        """Indices of every test sample visible at the given session."""
        if not 0 <= session_index <= len(self.sessions):
            raise SplitError(f"session index {session_index} out of range")
        parts = [self.base_test_indices]
        parts += [s.test_indices for s in self.sessions[:session_index]]
        return np.concatenate(parts)

    def classes_at(self, session_index: int) -> tuple[int, ...]:
        seen = list(self.base_classes)
        for entry in self.sessions[:session_index]:
            seen.extend(entry.classes)
        return tuple(seen)


def _validate_dataset(features: np.ndarray, labels: np.ndarray, class_count: int):
    if features.ndim != 2:
        raise DatasetError(f"features must be 2-d, got shape {features.shape}")
    if labels.shape != (features.shape[0],):
        raise DatasetError("labels must be 1-d and match the sample count")
    if features.size and (features.min() < 0.0 or features.max() > 1.0):
        raise DatasetError("features must lie in [0, 1]")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise LabelRangeError(
            f"labels must lie in [0, {class_count}), got max {labels.max()}"
        )


def make_synthetic(
    classes: int, per_class: int, dim: int, separation: float, seed: int
) -> Dataset:
    """Gaussian class clusters clipped into the unit box.

    Cluster centers are rejection-sampled so every pair is at least
    separation * CLUSTER_SIGMA apart. separation = 0 disables the spacing
    constraint; samples are always clipped into [0, 1]^d.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if per_class < 1 or dim < 1:
        raise ValueError("per_class and dim must be >= 1")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    min_dist = separation * CLUSTER_SIGMA
    margin = min(3.0 * CLUSTER_SIGMA, 0.4)
    centers = np.empty((classes, dim))
    for c in range(classes):
        for attempt in range(10_000):
            cand = rng.uniform(margin, 1.0 - margin, dim)
            if c == 0 or min_dist == 0.0:
                break
            if np.min(np.linalg.norm(centers[:c] - cand, axis=1)) >= min_dist:
                break
        else:
            raise ValueError(
                f"could not place {classes} centers at separation {separation}"
            )
        centers[c] = cand
    features = np.empty((classes * per_class, dim))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = centers[c] + rng.normal(0.0, CLUSTER_SIGMA, (per_class, dim))
        labels[block] = c
    np.clip(features, 0.0, 1.0, out=features)
    return Dataset(features, labels, classes)


def save_binary(ds: Dataset, path, dtype: int = DTYPE_F64) -> None:
    """Write the container format; dtype 1 stores features as u8 / 255."""
    if dtype not in (DTYPE_F64, DTYPE_U8):
        raise ValueError(f"unknown dtype code {dtype}")
    n, d = ds.features.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQQIB", FORMAT_VERSION, n, d, ds.class_count, dtype))
        if dtype == DTYPE_F64:
            fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        else:
            scaled = np.round(ds.features * 255.0).astype(np.uint8)
            fh.write(scaled.tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_binary(path) -> Dataset:
    """Read the container format; raises distinct errors for a missing file,
    bad magic, truncated payload, and out-of-range labels."""
    with open(path, "rb") as fh:  # missing file -> FileNotFoundError
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a dataset container (bad magic)")
    header = struct.calcsize("<IQQIB")
    if len(blob) < 4 + header:
        raise TruncatedError(f"{path}: truncated header")
    version, n, d, class_count, dtype = struct.unpack_from("<IQQIB", blob, 4)
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported container version {version}")
    offset = 4 + header
    if dtype == DTYPE_F64:
        feat_bytes = n * d * 8
    elif dtype == DTYPE_U8:
        feat_bytes = n * d
    else:
        raise DatasetError(f"{path}: unknown dtype code {dtype}")
    label_bytes = n * 4
    if len(blob) < offset + feat_bytes + label_bytes:
        raise TruncatedError(f"{path}: truncated payload")
    if dtype == DTYPE_F64:
        features = np.frombuffer(blob, "<f8", n * d, offset).reshape(n, d).copy()
    else:
        raw = np.frombuffer(blob, np.uint8, n * d, offset).reshape(n, d)
        features = raw.astype(np.float64) / 255.0
    labels = np.frombuffer(blob, "<u4", n, offset + feat_bytes).astype(np.int64)
    _validate_dataset(features, labels, class_count)
    return Dataset(features, labels, int(class_count))


def export_csv(ds: Dataset, path) -> None:
    """Plain CSV with header label,f0,...,f{d-1}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for label, row in zip(ds.labels, ds.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def build_splits(
    ds: Dataset,
    base_classes: int,
    sessions: int,
    ways: int,
    shots: int,
    test_per_class: int,
    seed: int,
) -> SessionSplit:
    """Deterministic base/incremental split.

    The class permutation and every per-class sample permutation are drawn
    from the seed. Base classes keep all non-test samples for training;
    incremental classes contribute exactly `shots` training samples.
    """
    needed = base_classes + sessions * ways
    if needed > ds.class_count:
        raise SplitError(
            f"need {needed} classes (base {base_classes} + {sessions}x{ways}), "
            f"dataset has {ds.class_count}"
        )
    if base_classes < 1 or ways < 1 or shots < 1 or test_per_class < 1:
        raise SplitError("base_classes, ways, shots, test_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    class_order = rng.permutation(ds.class_count)
    by_class = {c: np.flatnonzero(ds.labels == c) for c in range(ds.class_count)}
    counts = {c: len(idx) for c, idx in by_class.items()}
    short = [c for c in class_order[:needed] if counts[c] < shots + test_per_class]
    if short:
        raise SplitError(
            f"classes {sorted(int(c) for c in short)} have fewer than "
            f"shots + test_per_class = {shots + test_per_class} samples"
        )

    def shuffled(c):
        return by_class[c][rng.permutation(counts[c])]

    base = tuple(int(c) for c in class_order[:base_classes])
    base_train, base_test = [], []
    for c in base:
        order = shuffled(c)
        base_test.append(order[:test_per_class])
        base_train.append(order[test_per_class:])
    entries = []
    cursor = base_classes
    for _ in range(sessions):
        sess_classes = tuple(int(c) for c in class_order[cursor : cursor + ways])
        cursor += ways
        train, test = [], []
        for c in sess_classes:
            order = shuffled(c)
            train.append(order[:shots])
            test.append(order[shots : shots + test_per_class])
        entries.append(
            SessionEntry(sess_classes, np.concatenate(train), np.concatenate(test))
        )
    return SessionSplit(
        base_classes=base,
        base_train_indices=np.concatenate(base_train),
        base_test_indices=np.concatenate(base_test),
        sessions=tuple(entries),
        ways=ways,
        shots=shots,
    )
