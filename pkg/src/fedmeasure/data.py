"""Synthetic embedding datasets: generation, partitioning, duplication,
corruption, and file I/O.

Embedding sets stand in for precomputed model embeddings of image datasets;
every generator takes an explicit seed and is byte-for-byte reproducible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .linalg import as_matrix

BINARY_MAGIC = b"FDME"
BINARY_VERSION = 1

CORRUPTION_KINDS = ("gaussian", "scale", "mask", "shift")


class EmbeddingFormatError(ValueError):
    """Raised when an embedding file cannot be parsed."""


@dataclass(frozen=True)
class EmbeddingSet:
    """An n x d matrix of embedding vectors with optional integer class labels."""

    vectors: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "embeddings"

    def __post_init__(self):
        object.__setattr__(self, "vectors", as_matrix(self.vectors, "embedding matrix"))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.ndim != 1 or labels.shape[0] != self.n:
                raise ValueError("labels must be a vector with one entry per row")
            if labels.min(initial=0) < 0:
                raise ValueError("labels must be nonnegative class indices")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters of a labeled Gaussian-mixture embedding generator."""

    num_classes: int
    dim: int
    class_means: Sequence[np.ndarray]
    class_scales: Sequence[float]
    points_per_class: int
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.dim < 1 or self.points_per_class < 1:
            raise ValueError("num_classes, dim and points_per_class must be positive")
        if len(self.class_means) != self.num_classes or len(self.class_scales) != self.num_classes:
            raise ValueError("class_means and class_scales must have one entry per class")
        means = [np.asarray(m, dtype=np.float64) for m in self.class_means]
        for m in means:
            if m.shape != (self.dim,):
                raise ValueError(f"class mean has shape {m.shape}, expected ({self.dim},)")
        if any(s <= 0 for s in self.class_scales):
            raise ValueError("class_scales must be positive")
        object.__setattr__(self, "class_means", tuple(means))
        object.__setattr__(self, "class_scales", tuple(float(s) for s in self.class_scales))


def random_mixture_spec(
    num_classes: int = 10,
    dim: int = 512,
    mean_scale: float = 1.0,
    class_scale: float = 0.3,
    points_per_class: int = 1000,
    seed: int = 0,
    mean_offset: Optional[np.ndarray] = None,
) -> MixtureSpec:
    """Mixture spec with random unit-norm mean directions scaled by ``mean_scale``.

    ``mean_offset`` adds a common vector to every class mean (a dataset-level
    base direction).
    """
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= mean_scale
    if mean_offset is not None:
        means = means + np.asarray(mean_offset, dtype=np.float64)
    return MixtureSpec(
        num_classes=num_classes,
        dim=dim,
        class_means=list(means),
        class_scales=[class_scale] * num_classes,
        points_per_class=points_per_class,
        seed=seed,
    )


def sample_mixture(
    means: Sequence[np.ndarray],
    scales: Sequence[float],
    counts: Sequence[int],
    seed,
    name: str = "mixture",
) -> EmbeddingSet:
    """Sample a labeled mixture with an explicit per-class point count."""
    if len(means) != len(counts) or len(scales) != len(counts):
        raise ValueError("means, scales and counts must align")
    rng = np.random.default_rng(seed)
    blocks = []
    labels = []
    for cls, (mean, scale, count) in enumerate(zip(means, scales, counts)):
        if count < 0:
            raise ValueError("negative class count")
        mean = np.asarray(mean, dtype=np.float64)
        block = mean + scale * rng.standard_normal((count, mean.shape[0]))
        blocks.append(block)
        labels.append(np.full(count, cls, dtype=np.int64))
    vectors = np.concatenate(blocks, axis=0)
    return EmbeddingSet(vectors=vectors, labels=np.concatenate(labels), name=name)


def gaussian_mixture(spec: MixtureSpec, name: str = "mixture") -> EmbeddingSet:
    """Deterministic labeled sample with ``points_per_class`` points per class."""
    counts = [spec.points_per_class] * spec.num_classes
    return sample_mixture(spec.class_means, spec.class_scales, counts, spec.seed, name=name)


def add_shared_factors(
    dataset: EmbeddingSet,
    directions: np.ndarray,
    scales: Sequence[float],
    seed,
) -> EmbeddingSet:
    """Add zero-mean Gaussian variation along fixed directions to every row.

    Used to give several datasets a common dominant covariance structure, the
    way embeddings of different corpora share their strongest axes.
    """
    directions = as_matrix(directions, "factor directions")
    scales = np.asarray(scales, dtype=np.float64)
    if directions.shape[0] != scales.shape[0]:
        raise ValueError("one scale per direction required")
    if directions.shape[1] != dataset.dim:
        raise ValueError("direction dimensionality mismatch")
    rng = np.random.default_rng(seed)
    coeff = rng.standard_normal((dataset.n, directions.shape[0])) * scales
    return EmbeddingSet(
        vectors=dataset.vectors + coeff @ directions,
        labels=dataset.labels,
        name=dataset.name,
    )


def dirichlet_partition(
    dataset: EmbeddingSet,
    num_sellers: int,
    alpha: float,
    seed,
) -> list[EmbeddingSet]:
    """Split a labeled set across sellers with Dirichlet(alpha) class skew.

    Each seller draws class proportions from Dirichlet(alpha * 1) and the
    points of every class are divided across sellers proportionally, so the
    union of the outputs is exactly the input multiset.
    """
    if dataset.labels is None:
        raise ValueError("dirichlet_partition requires a labeled dataset")
    if num_sellers < 1:
        raise ValueError("num_sellers must be at least 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if num_sellers == 1:
        return [dataset]

    rng = np.random.default_rng(seed)
    num_classes = dataset.num_classes
    proportions = rng.dirichlet(np.full(num_classes, alpha), size=num_sellers)

    per_seller: list[list[np.ndarray]] = [[] for _ in range(num_sellers)]
    for cls in range(num_classes):
        idx = np.flatnonzero(dataset.labels == cls)
        rng.shuffle(idx)
        weights = proportions[:, cls]
        weights = weights / weights.sum()
        counts = allocate_counts(weights, len(idx))
        start = 0
        for seller, count in enumerate(counts):
            per_seller[seller].append(idx[start : start + count])
            start += count

    out = []
    for seller, pieces in enumerate(per_seller):
        rows = np.sort(np.concatenate(pieces)) if pieces else np.empty(0, dtype=np.int64)
        out.append(
            EmbeddingSet(
                vectors=dataset.vectors[rows],
                labels=dataset.labels[rows],
                name=f"{dataset.name}/seller{seller}",
            )
        )
    return out


def allocate_counts(weights, total: int) -> np.ndarray:
    """Integer allocation of ``total`` items proportional to ``weights``
    (largest-remainder rounding, deterministic tie-break by index)."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - counts.sum()
    if remainder > 0:
        # Stable sort keeps ties deterministic (lowest index first).
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def inject_duplicates(dataset: EmbeddingSet, factor: int, seed) -> EmbeddingSet:
    """Replace the set with ceil(n/factor) unique rows repeated ``factor`` times.

    The total row count is preserved exactly; the unique pool is a seeded
    random subset of the input rows and the final group is truncated as
    needed.
    """
    if factor < 1:
        raise ValueError("duplication factor must be at least 1")
    if factor == 1:
        return dataset
    n = dataset.n
    unique_count = math.ceil(n / factor)
    rng = np.random.default_rng(seed)
    pool = rng.permutation(n)[:unique_count]
    rows = np.repeat(pool, factor)[:n]
    labels = dataset.labels[rows] if dataset.labels is not None else None
    return EmbeddingSet(vectors=dataset.vectors[rows], labels=labels, name=dataset.name)


def corrupt(dataset: EmbeddingSet, kind: str, severity: int, seed) -> EmbeddingSet:
    """Apply a severity-parameterized corruption to every embedding vector.

    Kinds:
      gaussian - adds per-coordinate Gaussian noise with sigma equal to
                 0.05*severity times the coordinate std, while scaling the
                 data by sqrt(1 - alpha^2); per-coordinate variance is
                 preserved but the signal-to-noise ratio falls with severity,
                 mirroring how image-space noise degrades embeddings.
      scale    - multiplies a seeded random half of the coordinates by
                 (1 + 0.1*severity).
      mask     - zeroes a per-row random subset of floor(0.1*severity*d)
                 coordinates.
      shift    - adds a fixed random unit direction scaled by 0.1*severity.
    """
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind: {kind!r}")
    if not 1 <= severity <= 5:
        raise ValueError("severity must be an integer in 1..5")
    rng = np.random.default_rng(seed)
    x = dataset.vectors
    n, d = x.shape

    if kind == "gaussian":
        alpha = 0.05 * severity
        std = x.std(axis=0)
        noise = rng.standard_normal((n, d)) * (alpha * std)
        out = math.sqrt(1.0 - alpha * alpha) * x + noise
    elif kind == "scale":
        coords = rng.random(d) < 0.5
        out = x.copy()
        out[:, coords] *= 1.0 + 0.1 * severity
    elif kind == "mask":
        m = int(math.floor(0.1 * severity * d))
        out = x.copy()
        if m > 0:
            order = np.argsort(rng.random((n, d)), axis=1)[:, :m]
            np.put_along_axis(out, order, 0.0, axis=1)
    else:  # shift
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        out = x + 0.1 * severity * direction

    return EmbeddingSet(vectors=out, labels=dataset.labels, name=dataset.name)


def write_embeddings(dataset: EmbeddingSet, path) -> None:
    """Write a set to disk; '.csv' paths get CSV, everything else the binary format."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        _write_csv(dataset, path)
    else:
        _write_binary(dataset, path)


def read_embeddings(path, name: Optional[str] = None) -> EmbeddingSet:
    """Read a set written by :func:`write_embeddings`."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        dataset = _read_csv(path)
    else:
        dataset = _read_binary(path)
    if name is not None:
        dataset = EmbeddingSet(vectors=dataset.vectors, labels=dataset.labels, name=name)
    return dataset


def _write_binary(dataset: EmbeddingSet, path: Path) -> None:
    flag = 1 if dataset.labels is not None else 0
    header = struct.pack("<4sIQQB", BINARY_MAGIC, BINARY_VERSION, dataset.n, dataset.dim, flag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.vectors, dtype="<f8").tobytes())
        if flag:
            fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def _read_binary(path: Path) -> EmbeddingSet:
    blob = Path(path).read_bytes()
    header_size = struct.calcsize("<4sIQQB")
    if len(blob) < header_size or blob[:4] != BINARY_MAGIC:
        raise EmbeddingFormatError("not an embedding file")
    magic, version, n, d, flag = struct.unpack("<4sIQQB", blob[:header_size])
    if version != BINARY_VERSION:
        raise EmbeddingFormatError(f"unsupported embedding file version {version}")
    if flag not in (0, 1):
        raise EmbeddingFormatError("corrupt label flag")
    expected = header_size + n * d * 8 + (n * 4 if flag else 0)
    if len(blob) < expected:
        raise EmbeddingFormatError("truncated embedding file")
    if len(blob) > expected:
        raise EmbeddingFormatError("trailing bytes after embedding payload")
    vectors = np.frombuffer(blob, dtype="<f8", count=n * d, offset=header_size)
    vectors = vectors.reshape(n, d).astype(np.float64)
    labels = None
    if flag:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=header_size + n * d * 8)
        labels = labels.astype(np.int64)
    return EmbeddingSet(vectors=vectors, labels=labels, name=Path(path).stem)


def _write_csv(dataset: EmbeddingSet, path: Path) -> None:
    d = dataset.dim
    header = ",".join(f"e{j}" for j in range(d))
    if dataset.labels is not None:
        header += ",label"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(dataset.n):
            row = ",".join(repr(v) for v in dataset.vectors[i].tolist())
            if dataset.labels is not None:
                row += f",{int(dataset.labels[i])}"
            fh.write(row + "\n")


def _read_csv(path: Path) -> EmbeddingSet:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise EmbeddingFormatError("empty CSV file")
    header = lines[0].split(",")
    has_labels = header and header[-1].strip().lower() == "label"
    d = len(header) - (1 if has_labels else 0)
    if d < 1:
        raise EmbeddingFormatError("CSV header defines no embedding columns")
    rows = []
    labels = [] if has_labels else None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise EmbeddingFormatError(f"ragged CSV row at line {lineno}")
        try:
            rows.append([float(v) for v in parts[:d]])
            if has_labels:
                labels.append(int(parts[-1]))
        except ValueError as exc:
            raise EmbeddingFormatError(f"invalid CSV value at line {lineno}") from exc
    if not rows:
        raise EmbeddingFormatError("CSV file has no data rows")
    return EmbeddingSet(
        vectors=np.asarray(rows, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64) if has_labels else None,
        name=Path(path).stem,
    )
