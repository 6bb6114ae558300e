"""Gaussian summaries of embedding sets and the Frechet distance between them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_store import EmbeddingSet
from .errors import InsufficientData, NotSymmetric, NumericalFailure, ShapeError

SYM_TOL = 1e-9
PSD_TOL = 1e-8
NEG_FLOOR = -1e-6


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = mean.size
        if cov.shape != (d, d):
            raise ShapeError(f"covariance shape {cov.shape} does not match mean of length {d}")
        _check_symmetric(cov)
        if self.n < 2:
            raise InsufficientData(f"a summary needs n >= 2, got {self.n}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _check_symmetric(a: np.ndarray) -> None:
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    if np.abs(a - a.T).max(initial=0.0) > SYM_TOL * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")


def summarize(es: EmbeddingSet) -> GaussianSummary:
    """Column means and unbiased (N-1) covariance, symmetrised."""
    if es.n < 2:
        raise InsufficientData("need at least two rows to estimate a covariance")
    x = es.data
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (es.n - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianSummary(mean, cov, es.n)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    if w.size and w.min() < -PSD_TOL * max(1.0, abs(w.max())):
        raise NumericalFailure(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(a, b) -> float:
    """Tr((A B)^{1/2}) for symmetric PSD A, B.

    The eigenvalues of A^{1/2} B A^{1/2} are the squared singular values of
    B^{1/2} A^{1/2}, so the trace is the sum of those singular values. Taking
    them from an SVD avoids square roots of round-off sized eigenvalues,
    which matters for rank-deficient covariances.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    _check_symmetric(a)
    _check_symmetric(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    sa = _psd_sqrt(0.5 * (a + a.T))
    sb = _psd_sqrt(0.5 * (b + b.T))
    return float(np.linalg.svd(sb @ sa, compute_uv=False).sum())


def frechet_distance(p: GaussianSummary, q: GaussianSummary) -> float:
    if p.dim != q.dim:
        raise ShapeError(f"dimension mismatch {p.dim} vs {q.dim}")
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.cov, q.cov):
        return 0.0
    diff = p.mean - q.mean
    val = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * trace_sqrt_product(p.cov, q.cov))
    if val < NEG_FLOOR:
        raise NumericalFailure(f"Frechet distance came out negative ({val:.3e})")
    return max(val, 0.0)


def fid_between(a: EmbeddingSet, b: EmbeddingSet) -> float:
    return frechet_distance(summarize(a), summarize(b))
