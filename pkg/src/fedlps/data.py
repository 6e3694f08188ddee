"""Datasets, pathological non-IID partitioning and device capability assignment."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataConfigError(ValueError):
    pass


class IdxParseError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if len(self.features) < 1:
            raise DataConfigError("empty dataset")
        if len(self.labels) != len(self.features):
            raise DataConfigError("features and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataConfigError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass
class PartitionPlan:
    train: list[np.ndarray]
    test: list[np.ndarray]
    classes: list[np.ndarray]
    classes_per_client: int

    @property
    def clients(self) -> int:
        return len(self.train)


def synth_dataset(classes: int, dim: int, per_class: int, sep: float,
                  rng: np.random.Generator) -> Dataset:
    """Unit-variance Gaussian clusters whose means are pairwise ``sep`` apart.

    Means sit on orthogonal axes when ``dim >= classes``; otherwise on random
    directions scaled to the same norm.  Features are min-max scaled to [0, 1].
    """
    if sep <= 0:
        raise DataConfigError("sep must be positive")
    if dim >= classes:
        means = np.zeros((classes, dim))
        means[np.arange(classes), np.arange(classes)] = sep / np.sqrt(2.0)
        # random rotation so no single input coordinate is a class indicator
        rot, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        means = means @ rot
    else:
        dirs = rng.standard_normal((classes, dim))
        means = sep / np.sqrt(2.0) * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + rng.standard_normal((len(labels), dim))
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    x = (x - lo) / span
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order].astype(np.int64), classes)


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for y, row in zip(ds.labels, ds.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def read_csv(path, class_count: int | None = None) -> Dataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = data[:, 0].astype(np.int64)
    return Dataset(data[:, 1:], labels, class_count or int(labels.max()) + 1)


# --- IDX ----------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(data: bytes, expect_magic: int) -> np.ndarray:
    if len(data) < 8:
        raise IdxParseError(f"header truncated: expected at least 8 bytes, got {len(data)}", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expect_magic:
        raise IdxParseError(f"bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxParseError(f"header truncated: expected {header} bytes, got {len(data)}", len(data))
    shape = struct.unpack_from(f">{ndim}I", data, 4)
    expected = header + int(np.prod(shape))
    if len(data) < expected:
        raise IdxParseError(f"payload truncated: expected {expected} bytes, got {len(data)}", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=int(np.prod(shape)), offset=header).reshape(shape)


def load_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataConfigError(f"{len(images)} images but {len(labels)} labels")
    features = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    labels = np.asarray(labels, dtype=np.uint8)
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# --- partitioning -------------------------------------------------------------

def pathological_partition(ds: Dataset, clients: int, classes_per_client: int,
                           test_fraction: float, rng: np.random.Generator) -> PartitionPlan:
    """Shard each class and hand every client shards from exactly ``c`` classes.

    Classes are dealt round-robin over a random class permutation, so each
    client's classes are distinct and class usage differs by at most one.  All
    shards have the same size; each shard is split train/test by ``test_fraction``.
    """
    n_classes = ds.class_count
    c = classes_per_client
    if not 1 <= c <= n_classes:
        raise DataConfigError(f"classes_per_client must be in [1, {n_classes}], got {c}")
    if not 0 <= test_fraction < 1:
        raise DataConfigError("test_fraction must be in [0, 1)")
    perm = rng.permutation(n_classes)
    client_classes = [np.sort(perm[(k * c + np.arange(c)) % n_classes]) for k in range(clients)]
    uses = np.bincount(np.concatenate(client_classes), minlength=n_classes)

    by_class = [rng.permutation(np.flatnonzero(ds.labels == y)) for y in range(n_classes)]
    sizes = [len(by_class[y]) // uses[y] for y in range(n_classes) if uses[y]]
    shard = min(sizes)
    n_test = int(round(test_fraction * shard))
    if shard < 1 or shard - n_test < 1 or (test_fraction > 0 and n_test < 1):
        raise DataConfigError(
            f"insufficient samples per shard ({shard}) for {clients} clients x {c} classes"
        )
    cursor = np.zeros(n_classes, dtype=int)
    train, test = [], []
    for k in range(clients):
        tr, te = [], []
        for y in client_classes[k]:
            idx = by_class[y][cursor[y]:cursor[y] + shard]
            cursor[y] += shard
            te.append(idx[:n_test])
            tr.append(idx[n_test:])
        train.append(np.sort(np.concatenate(tr)))
        test.append(np.sort(np.concatenate(te)))
    return PartitionPlan(train, test, client_classes, c)


def label_histograms(ds: Dataset, plan: PartitionPlan) -> np.ndarray:
    return np.stack([np.bincount(ds.labels[idx], minlength=ds.class_count) for idx in plan.train])


def heterogeneity_chi2(ds: Dataset, plan: PartitionPlan) -> float:
    """Mean chi-squared distance of client label distributions to the pooled one."""
    hist = label_histograms(ds, plan).astype(np.float64)
    p = hist / hist.sum(axis=1, keepdims=True)
    pooled = hist.sum(axis=0) / hist.sum()
    denom = np.where(pooled > 0, pooled, 1.0)
    return float(np.mean(np.sum((p - pooled) ** 2 / denom, axis=1)))


def assign_capabilities(clients: int, levels: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    if len(levels) == 0:
        raise DataConfigError("capability levels must be non-empty")
    return np.asarray(levels, dtype=np.float64)[rng.integers(len(levels), size=clients)]
