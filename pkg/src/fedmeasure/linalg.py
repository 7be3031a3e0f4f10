"""Dense linear-algebra and statistics primitives shared by every other module.

Everything here is a pure function of its inputs; arrays are treated as
immutable and outputs are freshly allocated, so values can be shared freely
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_RTOL = 1e-9
PSD_RTOL = 1e-8


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D float64 array with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {m.shape}")
    if m.size == 0:
        raise ValueError("empty dataset")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SymmetricSpectrum:
    """Eigendecomposition of a symmetric matrix.

    eigenvalues are sorted descending; eigenvectors holds the matching
    eigenvectors as columns, orthonormal to ~1e-8.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def second_moment(x, center: bool = False, normalize: bool = False) -> np.ndarray:
    """Second-moment matrix X^T X of the rows of ``x``.

    With ``center`` the row mean is subtracted first (ordinary covariance
    scatter); with ``normalize`` the result is divided by the row count.
    Output is symmetrized to kill accumulation asymmetry.
    """
    x = as_matrix(x, "data matrix")
    if center:
        x = x - x.mean(axis=0)
    s = x.T @ x
    if normalize:
        s /= x.shape[0]
    return (s + s.T) / 2.0


def _fix_column_signs(v: np.ndarray) -> np.ndarray:
    # Deterministic orientation: largest-magnitude entry of each column > 0.
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def sym_eigen(s) -> SymmetricSpectrum:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    s = as_matrix(s, "symmetric matrix")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"matrix is not square: {s.shape}")
    scale = np.max(np.abs(s))
    if scale > 0 and np.max(np.abs(s - s.T)) > SYMMETRY_RTOL * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh((s + s.T) / 2.0)
    order = np.argsort(w)[::-1]
    return SymmetricSpectrum(eigenvalues=w[order], eigenvectors=_fix_column_signs(v[:, order]))


def top_k_directions(x, k: int) -> np.ndarray:
    """First ``k`` principal directions of mean-centered ``x`` as rows.

    Rows are orthonormal, ordered by descending explained variance, and
    sign-fixed (largest-magnitude entry positive) so results are
    deterministic.
    """
    x = as_matrix(x, "data matrix")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} out of range for {n}x{d} data")
    spectrum = sym_eigen(second_moment(x, center=True, normalize=True))
    return spectrum.eigenvectors[:, :k].T.copy()


def log_det_psd(s, jitter: float = 0.0) -> float:
    """log det(S + jitter*I) for a symmetric PSD matrix.

    Eigenvalues slightly negative from roundoff (within -1e-8*||S||) are
    clamped to zero; anything more negative is rejected. Finite for any
    jitter > 0.
    """
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    spectrum = sym_eigen(s)
    w = spectrum.eigenvalues
    scale = np.max(np.abs(w)) if w.size else 0.0
    if w.min(initial=0.0) < -PSD_RTOL * max(scale, 1e-300):
        raise ValueError("matrix has a negative eigenvalue beyond PSD tolerance")
    w = np.clip(w, 0.0, None)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(w + jitter)))


def random_orthonormal_rows(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    """Uniformly random orthonormal k x d frame (Haar measure via QR)."""
    if not 1 <= k <= d:
        raise ValueError(f"cannot draw {k} orthonormal rows in dimension {d}")
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return (q * np.sign(np.diagonal(r))).T.copy()


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile at fractional index q*(m-1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("quantile requires a nonempty 1-D list of values")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level {q} outside [0, 1]")
    return float(np.quantile(v, q))
