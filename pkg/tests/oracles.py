"""Slow, direct reference implementations used as test oracles.

None of these share code with the package: they loop in plain Python,
use full sorts, or evaluate in extended precision with mpmath.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import mpmath
import numpy as np
import scipy.linalg

mpmath.mp.dps = 40


def ranked_neighbors(x, i):
    """Every other row ordered by (squared distance, index), via a full sort."""
    sq = ((x - x[i]) ** 2).sum(axis=1).tolist()
    return sorted((j for j in range(len(x)) if j != i), key=lambda j: (sq[j], j))


def recall_oracle(x, labels, ks):
    x = np.asarray(x, dtype=np.float64)
    out = {}
    ranks = [ranked_neighbors(x, i) for i in range(len(x))]
    for k in ks:
        hits = [any(labels[j] == labels[i] for j in ranks[i][:k]) for i in range(len(x))]
        out[k] = sum(hits) / len(x)
    return out


def map_oracle(x, labels, cutoff):
    """Mean average precision at ``cutoff`` in exact rational arithmetic."""
    x = np.asarray(x, dtype=np.float64)
    aps = []
    for i in range(len(x)):
        rank = ranked_neighbors(x, i)[:cutoff]
        n_pos = sum(1 for j in range(len(x)) if j != i and labels[j] == labels[i])
        if n_pos == 0:
            aps.append(Fraction(0))
            continue
        hits, total = 0, Fraction(0)
        for pos, j in enumerate(rank, start=1):
            if labels[j] == labels[i]:
                hits += 1
                total += Fraction(hits, pos)
        aps.append(total / min(n_pos, cutoff))
    return float(sum(aps) / len(aps))


def fid_oracle(mu1, s1, mu2, s2):
    """Frechet distance through scipy's general (Schur) matrix square root of A B."""
    covmean = scipy.linalg.sqrtm(np.asarray(s1) @ np.asarray(s2))
    covmean = np.real(covmean)
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * np.trace(covmean))


def trace_sqrt_newton_schulz(a, b, iters=60):
    """Tr((AB)^{1/2}) via coupled Newton-Schulz iterations on A^{1/2} B A^{1/2}."""
    w, v = np.linalg.eigh(a)
    s = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    m = s @ b @ s
    norm = np.linalg.norm(m)
    if norm == 0:
        return 0.0
    y, z = m / norm, np.eye(len(m))
    for _ in range(iters):
        t = 0.5 * (3 * np.eye(len(m)) - z @ y)
        y, z = y @ t, t @ z
    return float(np.trace(y) * math.sqrt(norm))


def nmi_oracle(a, b):
    """2 I / (H_a + H_b) from an explicit contingency table, 40-digit arithmetic."""
    n = len(a)
    ca, cb = sorted(set(a)), sorted(set(b))
    table = {(p, q): sum(1 for x, y in zip(a, b) if x == p and y == q) for p in ca for q in cb}
    na = {p: sum(table[p, q] for q in cb) for p in ca}
    nb = {q: sum(table[p, q] for p in ca) for q in cb}
    N = mpmath.mpf(n)
    h_a = -mpmath.fsum(mpmath.mpf(c) / N * mpmath.log(mpmath.mpf(c) / N) for c in na.values())
    h_b = -mpmath.fsum(mpmath.mpf(c) / N * mpmath.log(mpmath.mpf(c) / N) for c in nb.values())
    mi = mpmath.fsum(
        mpmath.mpf(c) / N * mpmath.log(mpmath.mpf(c) * N / (na[p] * nb[q]))
        for (p, q), c in table.items() if c
    )
    if h_a + h_b == 0:
        return 0.0
    return float(2 * mi / (h_a + h_b))


def density_oracle(x, labels):
    classes = sorted(set(labels))
    intra, pairs = 0.0, 0
    centers = []
    for c in classes:
        rows = [x[i] for i in range(len(x)) if labels[i] == c]
        centers.append(np.mean(rows, axis=0))
        for p, q in itertools.combinations(rows, 2):
            intra += math.dist(p, q)
            pairs += 1
    inter = [math.dist(p, q) for p, q in itertools.combinations(centers, 2)]
    pi_intra = intra / pairs
    pi_inter = sum(inter) / len(inter)
    return pi_intra, pi_inter, pi_intra / pi_inter


def swap_pair_oracle(train_means: dict, test_means: dict, mu_train, mu_test):
    """Exhaustive argmax of the class-mean surrogate; smallest id on ties."""
    best_tr = max(sorted(train_means), key=lambda c: (
        math.dist(train_means[c], mu_train) - math.dist(train_means[c], mu_test), -c))
    best_te = max(sorted(test_means), key=lambda c: (
        math.dist(test_means[c], mu_test) - math.dist(test_means[c], mu_train), -c))
    return best_tr, best_te


def trapezoid_oracle(xs, ys):
    pts = sorted(zip(xs, ys))
    lo, hi = pts[0][0], pts[-1][0]
    xn = [(p - lo) / (hi - lo) for p, _ in pts]
    return sum((xn[i + 1] - xn[i]) * (pts[i][1] + pts[i + 1][1]) / 2 for i in range(len(pts) - 1))


def dws_probability_oracle(dists, dim, lam):
    """Clamped distance-weighted sampling probabilities in 40-digit arithmetic."""
    ws = []
    for d in dists:
        d = min(max(mpmath.mpf(d), mpmath.mpf("0.05")), mpmath.mpf("1.95"))
        q = d ** (dim - 2) * (1 - d * d / 4) ** (mpmath.mpf(dim - 3) / 2)
        ws.append(min(mpmath.mpf(lam), 1 / q))
    total = mpmath.fsum(ws)
    return [float(w / total) for w in ws]


def row_softmax_kl_oracle(a, b, t):
    n = len(a)
    total = mpmath.mpf(0)
    for i in range(n):
        ea = [mpmath.exp(mpmath.mpf(v) / t) for v in a[i]]
        eb = [mpmath.exp(mpmath.mpf(v) / t) for v in b[i]]
        za, zb = mpmath.fsum(ea), mpmath.fsum(eb)
        for pa, pb in zip(ea, eb):
            pa, pb = pa / za, pb / zb
            total += pb * (mpmath.log(pb) - mpmath.log(pa))
    return float(total * t * t / n)
