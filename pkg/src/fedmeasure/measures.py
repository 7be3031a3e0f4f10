"""Buyer queries, seller-side statistics, and the relevance/diversity measures.

A buyer builds a query of top-k principal directions from its reference
embeddings, a seller summarizes its data through that query, and scalar
measures compare the two summaries. A seller never has to expose raw rows:
every report field has size independent of the seller's point count.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .data import EmbeddingSet
from .linalg import as_matrix, log_det_psd, sym_eigen, top_k_directions

ORTHONORMAL_ATOL = 1e-8
DEFAULT_JITTER = 1e-10
DEFAULT_K = 10


class MeasureKind(str, Enum):
    L2 = "l2"
    COSINE = "cosine"
    CORRELATION = "correlation"
    OVERLAP = "overlap"
    VOLUME = "volume"
    ROBUST_VOLUME = "robust_volume"
    VENDI = "vendi"
    DISPERSION = "dispersion"
    DIFFERENCE = "difference"


RELEVANCE_KINDS = (
    MeasureKind.L2,
    MeasureKind.COSINE,
    MeasureKind.CORRELATION,
    MeasureKind.OVERLAP,
)
DIVERSITY_KINDS = (
    MeasureKind.VOLUME,
    MeasureKind.ROBUST_VOLUME,
    MeasureKind.VENDI,
    MeasureKind.DISPERSION,
    MeasureKind.DIFFERENCE,
)

# For every kind but "difference", a larger value signals a better seller.
# "difference" is near zero when buyer and seller spectra agree, so its
# preferred orientation is inverted; callers can flip it explicitly.
HIGHER_IS_BETTER = {kind: kind is not MeasureKind.DIFFERENCE for kind in MeasureKind}


def orthonormality_defect(directions: np.ndarray) -> float:
    k = directions.shape[0]
    return float(np.max(np.abs(directions @ directions.T - np.eye(k))))


@dataclass(frozen=True)
class QueryMatrix:
    """A k x d row-orthonormal projection sent from buyer to seller."""

    directions: np.ndarray
    query_id: str = field(default_factory=lambda: uuid.uuid4().hex)

    def __post_init__(self):
        directions = as_matrix(self.directions, "query directions")
        if orthonormality_defect(directions) > ORTHONORMAL_ATOL:
            raise ValueError("query rows are not orthonormal")
        object.__setattr__(self, "directions", directions)

    @property
    def k(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    def with_id(self, query_id: str) -> "QueryMatrix":
        return QueryMatrix(directions=self.directions, query_id=query_id)


@dataclass(frozen=True)
class MeasureConfig:
    """Knobs for seller-side statistics.

    The second moment defaults to the uncentered C = X^T X / n: the relevance
    measures read location information out of C, which centering would erase.
    """

    center: bool = False
    jitter: float = DEFAULT_JITTER
    omega: Optional[float] = None


@dataclass(frozen=True)
class MeasurementReport:
    """Statistics a seller computes for one query.

    mean_vector is the mean of the k rows of QC (a d-vector), lambdas the
    per-direction magnitudes ||(QC)_i||, projected_cov the k x k matrix
    Q C Q^T, and the four scalars the seller-computable diversity values.
    """

    mean_vector: np.ndarray
    lambdas: np.ndarray
    projected_cov: np.ndarray
    volume: float
    robust_volume: float
    vendi: float
    dispersion: float
    n_points: int

    def __post_init__(self):
        mean_vector = np.asarray(self.mean_vector, dtype=np.float64)
        lambdas = np.asarray(self.lambdas, dtype=np.float64)
        cov = as_matrix(self.projected_cov, "projected covariance")
        if mean_vector.ndim != 1 or lambdas.ndim != 1:
            raise ValueError("mean_vector and lambdas must be vectors")
        if cov.shape != (lambdas.shape[0], lambdas.shape[0]):
            raise ValueError("projected covariance shape does not match k")
        if lambdas.min(initial=0.0) < 0:
            raise ValueError("lambdas must be nonnegative")
        if self.n_points < 1:
            raise ValueError("n_points must be at least 1")
        object.__setattr__(self, "mean_vector", mean_vector)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "projected_cov", cov)

    @property
    def k(self) -> int:
        return self.lambdas.shape[0]

    @property
    def dim(self) -> int:
        return self.mean_vector.shape[0]


def compute_query(buyer: EmbeddingSet, k: int = DEFAULT_K) -> QueryMatrix:
    """Top-k principal directions of the buyer's reference embeddings."""
    if buyer.n < k:
        raise ValueError(f"buyer has {buyer.n} points, fewer than k={k}")
    return QueryMatrix(directions=top_k_directions(buyer.vectors, k))


def default_omega(buyer: EmbeddingSet, query: QueryMatrix) -> float:
    """Quantization cell width: 0.1x the median per-direction std of the
    projected buyer data."""
    projected = buyer.vectors @ query.directions.T
    omega = 0.1 * float(np.median(projected.std(axis=0)))
    return max(omega, 1e-12)


def seller_report(
    seller: EmbeddingSet,
    query: QueryMatrix,
    config: MeasureConfig = MeasureConfig(),
) -> MeasurementReport:
    """All measurement statistics of a seller's data under one query.

    Works entirely through the n x k projection, so the cost is O(n*d*k)
    rather than the O(n*d^2) of materializing C.
    """
    if seller.dim != query.dim:
        raise ValueError(f"seller dimension {seller.dim} != query dimension {query.dim}")
    x = seller.vectors
    n = seller.n
    if config.center:
        x = x - x.mean(axis=0)
    projected = x @ query.directions.T  # n x k
    qc = projected.T @ x / n  # k x d, equals Q C
    cov = projected.T @ projected / n  # k x k, equals Q C Q^T
    cov = (cov + cov.T) / 2.0

    omega = config.omega if config.omega is not None else default_omega(seller, query)
    return MeasurementReport(
        mean_vector=qc.mean(axis=0),
        lambdas=np.linalg.norm(qc, axis=1),
        projected_cov=cov,
        volume=log_det_psd(cov, config.jitter),
        robust_volume=diversity_robust_volume(seller, query, omega, jitter=config.jitter),
        vendi=_vendi_of_psd(cov),
        dispersion=_dispersion_of_psd(cov),
        n_points=n,
    )


# --- relevance -------------------------------------------------------------


def relevance_l2(buyer: MeasurementReport, seller: MeasurementReport) -> float:
    """Negative Euclidean distance between the report mean vectors."""
    _check_dims(buyer, seller)
    return -float(np.linalg.norm(buyer.mean_vector - seller.mean_vector))


def relevance_cosine(buyer: MeasurementReport, seller: MeasurementReport) -> float:
    _check_dims(buyer, seller)
    nb = np.linalg.norm(buyer.mean_vector)
    ns = np.linalg.norm(seller.mean_vector)
    if nb == 0.0 or ns == 0.0:
        raise ValueError("undefined cosine: zero mean vector")
    return float(np.dot(buyer.mean_vector, seller.mean_vector) / (nb * ns))


def relevance_correlation(buyer: MeasurementReport, seller: MeasurementReport) -> float:
    """Pearson correlation of the mean vectors over the d coordinates."""
    _check_dims(buyer, seller)
    xb = buyer.mean_vector - buyer.mean_vector.mean()
    xs = seller.mean_vector - seller.mean_vector.mean()
    denom = np.linalg.norm(xb) * np.linalg.norm(xs)
    if denom == 0.0:
        raise ValueError("undefined correlation: constant mean vector")
    return float(np.dot(xb, xs) / denom)


def relevance_overlap(buyer: MeasurementReport, seller: MeasurementReport) -> float:
    """Geometric mean of min/max ratios of the per-direction magnitudes."""
    lb, ls = _check_lambdas(buyer, seller)
    if lb.min() <= 0.0 or ls.min() <= 0.0:
        raise ValueError("degenerate component: zero lambda")
    ratios = np.minimum(lb, ls) / np.maximum(lb, ls)
    return float(np.exp(np.mean(np.log(ratios))))


# --- diversity -------------------------------------------------------------


def diversity_volume(seller: MeasurementReport, jitter: float = DEFAULT_JITTER) -> float:
    """log det of the projected covariance (jitter keeps it finite)."""
    return log_det_psd(seller.projected_cov, jitter)


def diversity_robust_volume(
    seller: EmbeddingSet,
    query: QueryMatrix,
    omega: float,
    jitter: float = DEFAULT_JITTER,
) -> float:
    """Duplicate-robust volume over grid-quantized projected points.

    Projects the raw rows, snaps them to a grid of cell width omega, drops
    duplicates, and returns log det over the surviving rows, unnormalized so
    genuinely new points keep raising the value.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    if seller.dim != query.dim:
        raise ValueError("seller dimension does not match query")
    projected = seller.vectors @ query.directions.T
    cells = np.unique(np.round(projected / omega).astype(np.int64), axis=0)
    unique_rows = cells.astype(np.float64) * omega
    gram = unique_rows.T @ unique_rows
    return log_det_psd(gram, jitter)


def _vendi_of_psd(cov: np.ndarray) -> float:
    w = sym_eigen(cov).eigenvalues
    w = np.clip(w, 0.0, None)
    total = w.sum()
    if total <= 0.0:
        raise ValueError("zero trace: vendi undefined")
    p = w / total
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def diversity_vendi(seller: MeasurementReport) -> float:
    """Effective count of distinct variance modes: exp of the entropy of the
    trace-normalized eigenvalues of the projected covariance."""
    return _vendi_of_psd(seller.projected_cov)


def _dispersion_of_psd(cov: np.ndarray) -> float:
    diag = np.diagonal(cov)
    if diag.min(initial=np.inf) <= 0.0:
        raise ValueError("nonpositive diagonal entry: dispersion undefined")
    return float(np.exp(0.5 * np.mean(np.log(diag))))


def diversity_dispersion(seller: MeasurementReport) -> float:
    """Geometric mean of the per-direction standard deviations."""
    return _dispersion_of_psd(seller.projected_cov)


def diversity_difference(buyer: MeasurementReport, seller: MeasurementReport) -> float:
    """Geometric mean of normalized per-direction magnitude differences."""
    lb, ls = _check_lambdas(buyer, seller)
    top = np.maximum(lb, ls)
    if top.min() <= 0.0:
        raise ValueError("degenerate component: both lambdas zero")
    ratios = np.abs(lb - ls) / top
    return float(np.prod(ratios) ** (1.0 / ratios.shape[0]))


# --- dispatch --------------------------------------------------------------


def evaluate(
    kind: MeasureKind,
    buyer: MeasurementReport,
    seller: MeasurementReport,
    jitter: float = DEFAULT_JITTER,
) -> float:
    """Scalar measurement of ``seller`` relative to ``buyer`` under one query."""
    kind = MeasureKind(kind)
    if kind is MeasureKind.L2:
        return relevance_l2(buyer, seller)
    if kind is MeasureKind.COSINE:
        return relevance_cosine(buyer, seller)
    if kind is MeasureKind.CORRELATION:
        return relevance_correlation(buyer, seller)
    if kind is MeasureKind.OVERLAP:
        return relevance_overlap(buyer, seller)
    if kind is MeasureKind.VOLUME:
        return diversity_volume(seller, jitter)
    if kind is MeasureKind.ROBUST_VOLUME:
        return seller.robust_volume
    if kind is MeasureKind.VENDI:
        return diversity_vendi(seller)
    if kind is MeasureKind.DISPERSION:
        return diversity_dispersion(seller)
    return diversity_difference(buyer, seller)


def evaluate_all(
    buyer: MeasurementReport,
    seller: MeasurementReport,
    kinds=tuple(MeasureKind),
    jitter: float = DEFAULT_JITTER,
) -> dict:
    """Evaluate several kinds at once; errors propagate."""
    return {MeasureKind(kind): evaluate(kind, buyer, seller, jitter) for kind in kinds}


def _check_dims(buyer: MeasurementReport, seller: MeasurementReport) -> None:
    if buyer.dim != seller.dim:
        raise ValueError("report dimensionality mismatch")


def _check_lambdas(buyer: MeasurementReport, seller: MeasurementReport):
    if buyer.k != seller.k:
        raise ValueError("report component count mismatch")
    return buyer.lambdas, seller.lambdas
