"""Retrieval, clustering and embedding-structure metrics.

Neighbour rankings exclude the query itself and break distance ties by the
smaller row index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .embed_store import EmbeddingSet
from .errors import (
    DegenerateSpectrum,
    InsufficientData,
    InvalidK,
    NeedTwoClasses,
    ShapeError,
    SingletonClass,
)

METRICS = ("euclidean", "cosine")
# rows of the distance matrix materialised at once
_CHUNK_ELEMS = 1 << 24


@dataclass
class RetrievalReport:
    recall_at: dict[int, float] = field(default_factory=dict)
    map_at: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, float]:
        out = {f"recall@{k}": v for k, v in sorted(self.recall_at.items())}
        out.update({f"map@{c}": v for c, v in sorted(self.map_at.items())})
        return out


@dataclass
class ClusterReport:
    assignments: np.ndarray
    inertia: float
    nmi: float | None = None
    inertia_history: list[float] = field(default_factory=list)
    iterations: int = 0


@dataclass
class StructureReport:
    pi_intra: float
    pi_inter: float
    pi_ratio: float
    spectral_decay: float | None = None

    def to_dict(self) -> dict[str, float]:
        out = {"pi_intra": self.pi_intra, "pi_inter": self.pi_inter, "pi_ratio": self.pi_ratio}
        if self.spectral_decay is not None:
            out["spectral_decay"] = self.spectral_decay
        return out


def _distances(queries: np.ndarray, base: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        # squared distance ranks identically and avoids a sqrt
        return cdist(queries, base, "sqeuclidean")
    if metric == "cosine":
        return cdist(queries, base, "cosine")
    raise ValueError(f"unknown metric {metric!r}, expected one of {METRICS}")


def neighbor_ranking(x: np.ndarray, depth: int, metric: str = "euclidean") -> np.ndarray:
    """Indices of the ``depth`` nearest rows for every row, self excluded.

    Returns an ``N x depth`` integer array ordered by increasing distance,
    ties resolved towards the lower row index.
    """
    n = x.shape[0]
    if not 1 <= depth <= n - 1:
        raise InvalidK(f"neighbour depth {depth} outside [1, {n - 1}]")
    out = np.empty((n, depth), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        dist = _distances(x[lo:hi], x, metric)
        dist[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        if depth < n - 1:
            # partition, then stable-sort the candidates at or below the cut
            kth = np.partition(dist, depth - 1, axis=1)[:, depth - 1]
            for r in range(hi - lo):
                cand = np.flatnonzero(dist[r] <= kth[r])
                order = np.lexsort((cand, dist[r, cand]))
                out[lo + r] = cand[order[:depth]]
        else:
            order = np.argsort(dist, axis=1, kind="stable")
            out[lo:hi] = order[:, :depth]
    return out


def recall_at_k(es: EmbeddingSet, ks: Sequence[int] = (1,), metric: str = "euclidean") -> RetrievalReport:
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1 or ks[-1] >= es.n:
        raise InvalidK(f"every k must satisfy 1 <= k < N={es.n}, got {ks}")
    nn = neighbor_ranking(es.data, ks[-1], metric)
    hits = es.labels[nn] == es.labels[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), ks[-1])
    return RetrievalReport(recall_at={k: float(np.mean(first_hit < k)) for k in ks})


def map_at(es: EmbeddingSet, cutoff: int = 1000, metric: str = "euclidean") -> float:
    """Mean average precision over rankings truncated at ``cutoff``.

    A query's AP is normalised by ``min(#same-class others, cutoff)``;
    queries with no same-class partner score 0.
    """
    if es.n < 2:
        raise InsufficientData("mAP needs at least two rows")
    if cutoff < 1:
        raise InvalidK(f"cutoff must be >= 1, got {cutoff}")
    depth = min(cutoff, es.n - 1)
    nn = neighbor_ranking(es.data, depth, metric)
    rel = es.labels[nn] == es.labels[:, None]
    _, inverse, counts = np.unique(es.labels, return_inverse=True, return_counts=True)
    n_pos = counts[inverse] - 1
    prec = np.cumsum(rel, axis=1) / np.arange(1, depth + 1)
    ap_sum = (prec * rel).sum(axis=1)
    denom = np.minimum(n_pos, cutoff)
    ap = np.divide(ap_sum, denom, out=np.zeros(es.n), where=denom > 0)
    return float(ap.mean())


def retrieval_report(es: EmbeddingSet, ks=(1, 2, 4, 8), map_cutoffs=(1000,), metric="euclidean") -> RetrievalReport:
    ks = [k for k in ks if k < es.n]
    rep = recall_at_k(es, ks, metric) if ks else RetrievalReport()
    for c in map_cutoffs:
        rep.map_at[int(c)] = map_at(es, int(c), metric)
    return rep


# -- clustering ---------------------------------------------------------------

def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[i] = x[idx]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(es: EmbeddingSet, k: int, seed: int = 0, max_iters: int = 300) -> ClusterReport:
    """k-means++ seeding followed by Lloyd iterations until assignments settle.

    An empty cluster keeps its previous centre, so inertia never increases.
    """
    x = es.data
    if not 1 <= k <= es.n:
        raise InvalidK(f"k={k} outside [1, N={es.n}]")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    assign = cdist(x, centers, "sqeuclidean").argmin(axis=1)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
        d2 = cdist(x, centers, "sqeuclidean")
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), new].sum()))
        if np.array_equal(new, assign):
            break
        assign = new
    inertia = history[-1] if history else float(cdist(x, centers, "sqeuclidean").min(axis=1).sum())
    return ClusterReport(assignments=assign, inertia=inertia, inertia_history=history, iterations=it)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(assignments, labels) -> float:
    """Normalized mutual information 2 I(A;B) / (H(A) + H(B)), natural logs."""
    a = np.asarray(assignments).reshape(-1)
    b = np.asarray(labels).reshape(-1)
    if a.shape != b.shape or a.size == 0:
        raise ShapeError(f"length mismatch: {a.size} assignments vs {b.size} labels")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    n = a.size
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha + hb == 0:
        return 0.0
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n**2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(min(1.0, max(0.0, 2.0 * mi / (ha + hb))))


def cluster_nmi(es: EmbeddingSet, k: int | None = None, seed: int = 0, max_iters: int = 300) -> ClusterReport:
    """Cluster with k = number of classes (by default) and score against labels."""
    k = len(es.classes) if k is None else k
    rep = kmeans(es, k, seed=seed, max_iters=max_iters)
    rep.nmi = nmi(rep.assignments, es.labels)
    return rep


# -- structure ----------------------------------------------------------------

def density(es: EmbeddingSet) -> tuple[float, float, float]:
    """(pi_intra, pi_inter, pi_ratio).

    pi_inter averages distances over unordered pairs of class centres;
    pi_intra sums within-class pair distances over all classes and divides by
    the total number of such pairs.
    """
    idx = es.class_index()
    if len(idx.class_ids) < 2:
        raise NeedTwoClasses("density needs at least two classes")
    intra_sum = 0.0
    intra_pairs = 0
    for cid, rows in zip(idx.class_ids, idx.row_groups):
        if len(rows) < 2:
            raise SingletonClass(int(cid))
        d = pdist(es.data[rows])
        intra_sum += float(d.sum())
        intra_pairs += d.size
    pi_intra = intra_sum / intra_pairs
    pi_inter = float(pdist(idx.class_means).mean())
    if pi_inter <= 0:
        raise NeedTwoClasses("all class centres coincide")
    return pi_intra, pi_inter, pi_intra / pi_inter


def spectral_decay(es: EmbeddingSet, skip_first: int = 10) -> float:
    """KL(uniform || normalised singular spectrum) of the mean-centred data."""
    x = es.data - es.data.mean(axis=0)
    sv = np.linalg.svd(x, compute_uv=False)
    sv = np.sort(sv)[::-1]
    if not 0 <= skip_first < sv.size:
        raise ValueError(f"skip_first={skip_first} must be in [0, {sv.size})")
    rest = sv[skip_first:]
    scale = sv[0] if sv.size and sv[0] > 0 else 0.0
    if rest.sum() <= 1e-12 * max(scale, 1e-300) or scale == 0.0:
        raise DegenerateSpectrum("remaining singular values are numerically zero")
    s = np.maximum(rest / rest.sum(), 1e-12)
    u = 1.0 / rest.size
    return float(np.sum(u * np.log(u / s)))


def structure_report(es: EmbeddingSet, skip_first: int = 10) -> StructureReport:
    pi_intra, pi_inter, ratio = density(es)
    return StructureReport(pi_intra, pi_inter, ratio, spectral_decay(es, skip_first))
