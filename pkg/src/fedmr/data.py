"""Datasets, IDX files, and client partitioning."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import DTYPE


class IdxFormatError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise ValueError(f"{len(self.xs)} samples but {len(self.ys)} labels")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.ys) and (self.ys.min() < 0 or self.ys.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.ys)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.xs[idx], self.ys[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.ys, minlength=self.num_classes)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    data: Dataset
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "dirichlet"
    num_clients: int = 100
    alpha: float = 0.5
    min_samples_per_client: int = 2
    max_retries: int = 100

    def __post_init__(self):
        if self.scheme not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be at least 1")
        if self.scheme == "dirichlet" and not self.alpha > 0:
            raise ValueError("alpha must be positive for the dirichlet scheme")
        if self.min_samples_per_client < 1:
            raise ValueError("min_samples_per_client must be at least 1")


# ---------------------------------------------------------------------------
# synthetic data


def proportional_counts(total: int, proportions: Sequence[float]) -> np.ndarray:
    """Split ``total`` into integer counts following ``proportions`` (largest remainder)."""
    p = np.asarray(proportions, dtype=DTYPE)
    if p.ndim != 1 or len(p) == 0 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("proportions must be a non-empty vector of non-negative weights")
    exact = total * p / p.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    # ties go to the lower class index
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def generate_synthetic(
    num_samples: int,
    num_classes: int,
    num_features: int = 2,
    kind: str = "blobs",
    noise: float = 1.0,
    seed: int = 0,
    proportions: Sequence[float] | None = None,
    clusters_per_class: int = 1,
    spread: float = 3.0,
) -> Dataset:
    """Seeded multiclass toy data.

    ``blobs`` draws ``clusters_per_class`` Gaussian centres per class (scale
    ``spread``) and scatters samples around them with standard deviation
    ``noise``. ``spiral`` builds interleaved 2-D spiral arms with angular
    jitter ``noise``. Class sizes follow ``proportions`` exactly (uniform by
    default). Samples come out shuffled.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if num_samples < num_classes:
        raise ValueError("need at least one sample per class")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if proportions is None:
        proportions = np.ones(num_classes)
    if len(proportions) != num_classes:
        raise ValueError(f"{len(proportions)} proportions for {num_classes} classes")
    counts = proportional_counts(num_samples, proportions)
    rng = np.random.default_rng(seed)
    ys = np.repeat(np.arange(num_classes), counts)

    if kind == "blobs":
        if num_features < 1 or clusters_per_class < 1:
            raise ValueError("num_features and clusters_per_class must be positive")
        centers = rng.normal(0.0, spread, size=(num_classes, clusters_per_class, num_features))
        cluster = rng.integers(clusters_per_class, size=num_samples)
        xs = centers[ys, cluster] + noise * rng.standard_normal((num_samples, num_features))
    elif kind == "spiral":
        if num_features != 2:
            raise ValueError("spiral data is two-dimensional")
        xs = np.empty((num_samples, 2))
        for c in range(num_classes):
            rows = ys == c
            t = np.linspace(0.05, 1.0, counts[c])
            angle = 4.0 * t + 2.0 * np.pi * c / num_classes + noise * rng.standard_normal(counts[c])
            xs[rows] = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")

    order = rng.permutation(num_samples)
    return Dataset(np.ascontiguousarray(xs[order], dtype=DTYPE), ys[order], num_classes)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if n_test < 1 or n_test >= n:
        raise ValueError(f"test_fraction {test_fraction} leaves an empty split of {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file into an array of its declared dtype and shape."""
    with _open(path) as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", blob[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_TYPES:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    dtype = _IDX_TYPES[(magic >> 8) & 0xFF]
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(shape, dtype=np.int64))
    need = header + count * dtype.itemsize
    if len(blob) < need:
        raise IdxFormatError(f"{path}: truncated data, {len(blob)} bytes but header implies {need}")
    if len(blob) > need:
        raise IdxFormatError(f"{path}: {len(blob) - need} trailing bytes")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=header).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    for code, dt in _IDX_TYPES.items():
        if dt.kind == arr.dtype.kind and dt.itemsize == arr.dtype.itemsize:
            break
    else:
        raise ValueError(f"dtype {arr.dtype} has no IDX encoding")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", (code << 8) | arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(dt, copy=False).tobytes())


def load_idx_images(images_path, labels_path, num_classes: int | None = None, flatten: bool = False) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1].

    Images are returned as ``(n, 1, rows, cols)`` for convolutional models,
    or ``(n, rows * cols)`` with ``flatten=True``.
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    xs = images.astype(DTYPE) / 255.0
    xs = xs.reshape(len(xs), -1) if flatten else xs[:, None, :, :]
    ys = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(ys.max()) + 1 if len(ys) else 1
    return Dataset(np.ascontiguousarray(xs), ys, num_classes)


# ---------------------------------------------------------------------------
# partitioning


def partition(dataset: Dataset, spec: PartitionSpec, seed: int = 0) -> list[ClientShard]:
    """Split ``dataset`` across ``spec.num_clients`` disjoint shards.

    For the dirichlet scheme, each class draws its own client proportions
    from Dir(alpha) and its samples are dealt out accordingly. Draws that
    leave a client under ``min_samples_per_client`` are repeated up to
    ``max_retries`` times; after that, samples are moved one at a time from
    the largest shard to each short one.
    """
    n, N = len(dataset), spec.num_clients
    if n < N * spec.min_samples_per_client:
        raise PartitionError(
            f"{n} samples cannot give {N} clients at least {spec.min_samples_per_client} each"
        )
    rng = np.random.default_rng(seed)
    if spec.scheme == "iid":
        assignment = np.array_split(rng.permutation(n), N)
    else:
        for _ in range(spec.max_retries + 1):
            assignment = _dirichlet_assignment(dataset.ys, dataset.num_classes, N, spec.alpha, rng)
            if min(len(a) for a in assignment) >= spec.min_samples_per_client:
                break
        else:
            assignment = _top_up(assignment, spec.min_samples_per_client)
    return [
        ClientShard(cid, dataset.subset(idx), idx)
        for cid, idx in enumerate(np.sort(a).astype(np.int64) for a in assignment)
    ]


def _dirichlet_assignment(ys, num_classes, N, alpha, rng) -> list[np.ndarray]:
    parts: list[list[np.ndarray]] = [[] for _ in range(N)]
    for c in range(num_classes):
        members = np.flatnonzero(ys == c)
        if len(members) == 0:
            continue
        members = rng.permutation(members)
        while True:
            g = rng.gamma(alpha, size=N)
            if g.sum() > 0:
                break
        p = g / g.sum()
        cuts = (np.cumsum(p)[:-1] * len(members)).astype(np.int64)
        for client, chunk in enumerate(np.split(members, cuts)):
            parts[client].append(chunk)
    return [np.concatenate(p) if p else np.empty(0, np.int64) for p in parts]


def _top_up(assignment: list[np.ndarray], minimum: int) -> list[np.ndarray]:
    shards = [list(a) for a in assignment]
    while True:
        short = [i for i, s in enumerate(shards) if len(s) < minimum]
        if not short:
            return [np.array(s, dtype=np.int64) for s in shards]
        for i in short:
            donor = max(range(len(shards)), key=lambda j: (len(shards[j]), -j))
            shards[i].append(shards[donor].pop())


def label_entropy(labels, num_classes: int) -> float:
    """Shannon entropy (nats) of a label multiset."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def mean_label_entropy(shards: Sequence[ClientShard]) -> float:
    return float(np.mean([label_entropy(s.data.ys, s.data.num_classes) for s in shards]))


def partition_manifest(shards: Sequence[ClientShard], spec: PartitionSpec, seed: int) -> dict:
    return {
        "scheme": spec.scheme,
        "alpha": spec.alpha if spec.scheme == "dirichlet" else None,
        "proportions": "per-class over clients" if spec.scheme == "dirichlet" else None,
        "num_clients": spec.num_clients,
        "min_samples_per_client": spec.min_samples_per_client,
        "seed": seed,
        "clients": {str(s.client_id): s.indices.tolist() for s in shards},
    }


def save_partition_manifest(path, shards: Sequence[ClientShard], spec: PartitionSpec, seed: int) -> None:
    with open(path, "w") as fh:
        json.dump(partition_manifest(shards, spec, seed), fh, indent=1)
        fh.write("\n")
