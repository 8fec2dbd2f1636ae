"""Dataset synthesis, IDX ingestion, and client partitioning.

Partitioning covers the IID split, the per-class Dirichlet non-IID split, and
the personalized per-client test split whose label histogram mirrors each
client's training shard. All functions are deterministic under their seed.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, IdxFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, ...) float
    labels: np.ndarray    # (n,) int
    num_classes: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels must have the same length")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Partition:
    client_train: tuple[np.ndarray, ...]
    client_test: tuple[np.ndarray, ...]


def synth_dataset(num_classes: int, dim: int, per_class: int,
                  spread: float, seed) -> Dataset:
    """Gaussian class clusters: seeded unit-scale means, ``spread`` noise."""
    if num_classes < 2 or per_class < 1 or dim < 1:
        raise ConfigurationError("need num_classes >= 2, dim >= 1, per_class >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 1.0, size=(num_classes, dim))
    feats = np.empty((num_classes * per_class, dim))
    labels = np.empty(num_classes * per_class, dtype=int)
    for c in range(num_classes):
        sl = slice(c * per_class, (c + 1) * per_class)
        feats[sl] = means[c] + spread * rng.normal(size=(per_class, dim))
        labels[sl] = c
    return Dataset(feats, labels, num_classes)


def dataset_to_csv(ds: Dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = int(np.prod(ds.features.shape[1:]))
        writer.writerow([f"x{i}" for i in range(dim)] + ["label"])
        flat = ds.features.reshape(len(ds), -1)
        for row, y in zip(flat, ds.labels):
            writer.writerow([repr(v) for v in row] + [int(y)])


def _read_idx_header(blob: bytes, path, magic: int, ndims: int):
    if len(blob) < 4 * (1 + ndims):
        raise IdxFormatError(f"{path}: truncated header")
    got = struct.unpack_from(">I", blob, 0)[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} (expected 0x{magic:08x})")
    dims = struct.unpack_from(f">{ndims}I", blob, 4)
    return dims, 4 * (1 + ndims)


def load_idx(images_path, labels_path) -> Dataset:
    """Big-endian IDX image/label pair; pixels scaled to [0, 1]."""
    img_blob = open(images_path, "rb").read()
    lab_blob = open(labels_path, "rb").read()
    (n, rows, cols), off = _read_idx_header(img_blob, images_path, IDX_IMAGES_MAGIC, 3)
    if len(img_blob) != off + n * rows * cols:
        raise IdxFormatError(f"{images_path}: payload does not match header dims")
    (n_lab,), lab_off = _read_idx_header(lab_blob, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lab_blob) != lab_off + n_lab:
        raise IdxFormatError(f"{labels_path}: payload does not match header count")
    if n != n_lab:
        raise IdxFormatError(f"image count {n} != label count {n_lab}")
    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=off).reshape(n, rows * cols)
    labels = np.frombuffer(lab_blob, dtype=np.uint8, offset=lab_off).astype(int)
    num_classes = int(labels.max()) + 1 if n else 10
    return Dataset(pixels.astype(np.float64) / 255.0, labels, num_classes)


def _repair_empty_clients(assign: list[list[int]]):
    # FL rounds need non-empty shards; move one sample from the largest client
    for k, lst in enumerate(assign):
        if not lst:
            donor = max(range(len(assign)), key=lambda j: len(assign[j]))
            if len(assign[donor]) <= 1:
                raise ConfigurationError("not enough samples to give every client one")
            lst.append(assign[donor].pop())


def dirichlet_partition(labels: np.ndarray, num_clients: int, gamma: float,
                        seed) -> tuple[np.ndarray, ...]:
    """Per class, draw client shares ~ Dirichlet(gamma) and assign samples multinomially."""
    if gamma <= 0.0 or num_clients < 1:
        raise ConfigurationError("need gamma > 0 and at least one client")
    if len(labels) < num_clients:
        raise ConfigurationError("fewer samples than clients")
    rng = np.random.default_rng(seed)
    assign: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        shares = rng.dirichlet(np.full(num_clients, gamma))
        owners = rng.choice(num_clients, size=len(idx), p=shares)
        for k in range(num_clients):
            assign[k].extend(idx[owners == k].tolist())
    _repair_empty_clients(assign)
    return tuple(np.sort(np.array(lst, dtype=int)) for lst in assign)


def iid_partition(labels: np.ndarray, num_clients: int, seed) -> tuple[np.ndarray, ...]:
    """Seeded uniform shuffle, near-equal split (sizes differ by at most 1)."""
    if num_clients < 1:
        raise ConfigurationError("need at least one client")
    if len(labels) < num_clients:
        raise ConfigurationError("fewer samples than clients")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labels))
    return tuple(np.sort(chunk) for chunk in np.array_split(perm, num_clients))


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``proportions``."""
    proportions = np.asarray(proportions, dtype=float)
    ideal = proportions / proportions.sum() * total
    counts = np.floor(ideal).astype(int)
    short = total - int(counts.sum())
    order = np.argsort(-(ideal - counts), kind="stable")
    for j in order[:short]:
        counts[j] += 1
    return counts


def label_histogram(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(labels, minlength=num_classes)


def personalized_test_split(test_labels: np.ndarray, train_histograms: list[np.ndarray],
                            per_client: int = 100, seed=0) -> tuple[np.ndarray, ...]:
    """Per-client test index lists whose label histogram matches the train shard.

    Draws without replacement from the pooled test set per client; if a class
    pool is exhausted it falls back to drawing with replacement and warns.
    """
    rng = np.random.default_rng(seed)
    num_classes = len(train_histograms[0])
    pools = [np.flatnonzero(test_labels == c) for c in range(num_classes)]
    out = []
    for k, hist in enumerate(train_histograms):
        hist = np.asarray(hist, dtype=float)
        if hist.sum() <= 0:
            raise ConfigurationError(f"client {k} has an empty training histogram")
        wants = largest_remainder(hist, per_client)
        picks = []
        for c, n_c in enumerate(wants):
            if n_c == 0:
                continue
            pool = pools[c]
            if len(pool) == 0:
                raise ConfigurationError(f"test set has no samples of class {c}")
            if n_c <= len(pool):
                picks.append(rng.choice(pool, size=int(n_c), replace=False))
            else:
                warnings.warn(f"client {k}: class {c} test pool exhausted "
                              f"({n_c} > {len(pool)}); sampling with replacement")
                picks.append(rng.choice(pool, size=int(n_c), replace=True))
        out.append(np.sort(np.concatenate(picks)))
    return tuple(out)
