"""Metric-learning objectives and multiscale self-distillation, with analytic gradients.

Every objective returns a :class:`LossOutput` whose ``grad_embeddings`` is
the gradient of ``value`` with respect to the embeddings it was given.
Hinges and mining masks use subgradient 0 at their kinks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import InvalidState, NoNegatives, NotNormalized, ShapeError
from .mlp import MLPHead, backward, forward, normalize_rows, normalize_rows_backward

# the sampling density is singular at d = 0 and d = 2
DIST_CLAMP = (0.05, 1.95)
UNIT_TOL = 1e-5


@dataclass
class MarginConfig:
    margin: float = 0.2
    beta_init: float = 1.2
    beta_lr: float = 5e-4
    sampling_lambda: float = 0.5
    p_switch: float = 0.0

    def __post_init__(self):
        if self.margin < 0 or self.beta_init <= 0 or self.sampling_lambda <= 0:
            raise ValueError("need margin >= 0, beta_init > 0 and sampling_lambda > 0")
        if not 0.0 <= self.p_switch <= 1.0:
            raise ValueError("p_switch must be in [0, 1]")


@dataclass
class MultisimConfig:
    alpha: float = 2.0
    beta: float = 40.0
    lam: float = 0.5
    epsilon: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


@dataclass
class S2SDConfig:
    gamma: float = 5.0
    temperature: float = 1.0
    target_dims: tuple[int, ...] = (512, 1024, 1536, 2048)
    warmup_iters: int = 0
    use_feature_distill: bool = True
    detach_targets: bool = True
    # weight of the target-branch DML losses inside (base + w * mean(targets)) / 2
    target_weight: float = 1.0

    def __post_init__(self):
        self.target_dims = tuple(int(d) for d in self.target_dims)
        if self.gamma < 0 or self.temperature <= 0:
            raise ValueError("need gamma >= 0 and temperature > 0")
        if list(self.target_dims) != sorted(self.target_dims):
            raise ValueError("target_dims must be ascending")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")


@dataclass
class LossOutput:
    value: float
    grad_embeddings: np.ndarray
    aux_grads: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)


Criterion = Callable[[np.ndarray, np.ndarray], LossOutput]


def check_unit_rows(x: np.ndarray, tol: float = UNIT_TOL) -> None:
    norms = np.linalg.norm(x, axis=1)
    if not np.all(np.abs(norms - 1.0) <= tol):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise NotNormalized(f"row {bad} has norm {norms[bad]:.6g}")


# -- margin loss and distance-weighted sampling -----------------------------------

def negative_log_weights(dist: np.ndarray, dim: int, lam: float) -> np.ndarray:
    """log of ``min(lam, 1 / q(d))`` with q(d) = d^(n-2) (1 - d^2/4)^((n-3)/2)."""
    d = np.clip(dist, *DIST_CLAMP)
    log_q = (dim - 2.0) * np.log(d) + 0.5 * (dim - 3.0) * np.log(1.0 - 0.25 * d * d)
    return np.minimum(np.log(lam), -log_q)


def negative_probabilities(embeddings: np.ndarray, labels: np.ndarray, anchor: int,
                           cfg: MarginConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Candidate negatives of ``anchor`` and their sampling probabilities."""
    cfg = cfg or MarginConfig()
    labels = np.asarray(labels)
    neg = np.flatnonzero(labels != labels[anchor])
    if neg.size == 0:
        raise NoNegatives(f"anchor {anchor} has no negatives in the batch")
    dist = np.linalg.norm(embeddings[neg] - embeddings[anchor], axis=1)
    logw = negative_log_weights(dist, embeddings.shape[1], cfg.sampling_lambda)
    w = np.exp(logw - logw.max())
    return neg, w / w.sum()


def distance_weighted_sample(embeddings: np.ndarray, labels: np.ndarray, anchor: int,
                             rng: np.random.Generator, cfg: MarginConfig | None = None) -> int:
    """Draw a negative for ``anchor``.

    With probability ``cfg.p_switch`` a random positive is returned in its
    place (regularised margin); callers still treat it as a negative pair.
    """
    cfg = cfg or MarginConfig()
    neg, p = negative_probabilities(embeddings, labels, anchor, cfg)
    if cfg.p_switch > 0 and rng.random() < cfg.p_switch:
        pos = np.flatnonzero(labels == labels[anchor])
        pos = pos[pos != anchor]
        if pos.size:
            return int(pos[rng.integers(pos.size)])
    return int(neg[rng.choice(neg.size, p=p)])


def sample_pairs(embeddings: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                 cfg: MarginConfig | None = None) -> np.ndarray:
    """One random positive and one distance-weighted negative per anchor.

    Returns an int array of rows ``(i, j, is_positive)``. Anchors without a
    positive or a negative in the batch are skipped.
    """
    cfg = cfg or MarginConfig()
    labels = np.asarray(labels)
    out = []
    for a in range(len(labels)):
        pos = np.flatnonzero(labels == labels[a])
        pos = pos[pos != a]
        if pos.size == 0 or np.all(labels == labels[a]):
            continue
        p = int(pos[rng.integers(pos.size)])
        n = distance_weighted_sample(embeddings, labels, a, rng, cfg)
        out.append((a, p, 1))
        out.append((a, n, 0))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def margin_loss(embeddings: np.ndarray, labels: np.ndarray, betas: np.ndarray, cfg: MarginConfig,
                pairs: np.ndarray) -> LossOutput:
    """Mean over pairs of ``[m + s * (beta_{y_i} - d_ij)]_+`` with s = -1 for positives.

    ``aux_grads["betas"]`` holds the gradient with respect to the per-class
    boundaries.
    """
    check_unit_rows(embeddings)
    labels = np.asarray(labels)
    betas = np.asarray(betas, dtype=np.float64)
    grad = np.zeros_like(embeddings)
    gbeta = np.zeros_like(betas)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    if len(pairs) == 0:
        return LossOutput(0.0, grad, {"betas": gbeta})
    i, j, is_pos = pairs[:, 0], pairs[:, 1], pairs[:, 2].astype(bool)
    diff = embeddings[i] - embeddings[j]
    dist = np.linalg.norm(diff, axis=1)
    sign = np.where(is_pos, -1.0, 1.0)
    b = betas[labels[i]]
    arg = cfg.margin + sign * (b - dist)
    active = arg > 0
    value = float(np.where(active, arg, 0.0).mean())
    scale = np.where(active, 1.0 / len(pairs), 0.0)
    # d arg / d dist = -sign, d dist / d e_i = diff / dist
    coef = (-sign * scale / np.maximum(dist, 1e-12))[:, None] * diff
    np.add.at(grad, i, coef)
    np.add.at(grad, j, -coef)
    np.add.at(gbeta, labels[i], sign * scale)
    return LossOutput(value, grad, {"betas": gbeta})


def margin_slack(embeddings, labels, betas, cfg: MarginConfig, pairs) -> float:
    """Smallest |hinge argument| over ``pairs``; distance to the nearest kink."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    if len(pairs) == 0:
        return np.inf
    i, j = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(embeddings[i] - embeddings[j], axis=1)
    sign = np.where(pairs[:, 2] == 1, -1.0, 1.0)
    return float(np.abs(cfg.margin + sign * (np.asarray(betas)[np.asarray(labels)[i]] - dist)).min())


class MarginObjective:
    """Margin loss with learnable per-class boundaries and its own sampler.

    When ``pairs`` is set the sampler is bypassed, which keeps the loss a
    fixed function of the embeddings (used for gradient checks).
    """

    def __init__(self, num_classes: int, cfg: MarginConfig | None = None,
                 rng: np.random.Generator | None = None, pairs: np.ndarray | None = None):
        self.cfg = cfg or MarginConfig()
        self.betas = np.full(num_classes, self.cfg.beta_init, dtype=np.float64)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.pairs = pairs
        self.last_pairs: np.ndarray | None = None

    def __call__(self, embeddings: np.ndarray, labels: np.ndarray) -> LossOutput:
        pairs = self.pairs
        if pairs is None:
            pairs = sample_pairs(embeddings, labels, self.rng, self.cfg)
        self.last_pairs = pairs
        return margin_loss(embeddings, labels, self.betas, self.cfg, pairs)

    def parameters(self) -> list[np.ndarray]:
        return [self.betas]


# -- multi-similarity ------------------------------------------------------------

def _multisim_masks(sim: np.ndarray, labels: np.ndarray, eps: float):
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    min_pos = np.where(same, sim, np.inf).min(axis=1)
    max_neg = np.where(diff, sim, -np.inf).max(axis=1)
    # an empty comparison set imposes no constraint
    has_pos = same.any(axis=1)[:, None]
    has_neg = diff.any(axis=1)[:, None]
    keep_neg = diff & ((sim > min_pos[:, None] - eps) | ~has_pos)
    keep_pos = same & ((sim < max_neg[:, None] + eps) | ~has_neg)
    return keep_pos, keep_neg, min_pos, max_neg, same, diff


def multisim_loss(embeddings: np.ndarray, labels: np.ndarray, cfg: MultisimConfig | None = None) -> LossOutput:
    """Multi-similarity loss on cosine similarities with hard-pair mining.

    A negative is kept when its similarity exceeds the anchor's hardest
    positive minus epsilon, a positive when it falls below the hardest
    negative plus epsilon. Per anchor::

        1/alpha log(1 + sum_P exp(-alpha (s - lam))) + 1/beta log(1 + sum_N exp(beta (s - lam)))

    averaged over all anchors of the batch.
    """
    cfg = cfg or MultisimConfig()
    check_unit_rows(embeddings)
    labels = np.asarray(labels)
    b = len(labels)
    sim = embeddings @ embeddings.T
    keep_pos, keep_neg, *_ = _multisim_masks(sim, labels, cfg.epsilon)
    ep = np.where(keep_pos, np.exp(-cfg.alpha * (sim - cfg.lam)), 0.0)
    en = np.where(keep_neg, np.exp(cfg.beta * (sim - cfg.lam)), 0.0)
    sp, sn = ep.sum(axis=1), en.sum(axis=1)
    value = float(np.mean(np.log1p(sp) / cfg.alpha + np.log1p(sn) / cfg.beta))
    g_sim = (-ep / (1.0 + sp)[:, None] + en / (1.0 + sn)[:, None]) / b
    grad = (g_sim + g_sim.T) @ embeddings
    return LossOutput(value, grad)


def multisim_slack(embeddings, labels, cfg: MultisimConfig | None = None) -> float:
    """Distance of the closest similarity to a mining threshold."""
    cfg = cfg or MultisimConfig()
    labels = np.asarray(labels)
    sim = embeddings @ embeddings.T
    _, _, min_pos, max_neg, same, diff = _multisim_masks(sim, labels, cfg.epsilon)
    gaps = []
    for i in range(len(labels)):
        if same[i].any() and diff[i].any():
            gaps.append(np.abs(sim[i, diff[i]] - (min_pos[i] - cfg.epsilon)))
            gaps.append(np.abs(sim[i, same[i]] - (max_neg[i] + cfg.epsilon)))
    return float(np.concatenate(gaps).min()) if gaps else np.inf


class MultisimObjective:
    def __init__(self, cfg: MultisimConfig | None = None):
        self.cfg = cfg or MultisimConfig()

    def __call__(self, embeddings: np.ndarray, labels: np.ndarray) -> LossOutput:
        return multisim_loss(embeddings, labels, self.cfg)

    def parameters(self) -> list[np.ndarray]:
        return []


# -- similarity-matrix distillation -------------------------------------------------

def row_softmax_kl(a: np.ndarray, b: np.ndarray, temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Row-wise KL(softmax(B/T) || softmax(A/T)), summed, times T^2 / N.

    B is the (detached) teacher; the gradient is returned for A only.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"need equal square matrices, got {a.shape} and {b.shape}")
    t = float(temperature)
    n = a.shape[0]
    log_pa = log_softmax(a / t, axis=1)
    log_pb = log_softmax(b / t, axis=1)
    pb = np.exp(log_pb)
    value = float(np.sum(pb * (log_pb - log_pa)) * t * t / n)
    grad_a = (np.exp(log_pa) - pb) * (t / n)
    return max(value, 0.0), grad_a


def row_softmax_kl_grad_target(a: np.ndarray, b: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient of :func:`row_softmax_kl` with respect to the teacher matrix B."""
    t = float(temperature)
    n = a.shape[0]
    log_pa = log_softmax(a / t, axis=1)
    log_pb = log_softmax(b / t, axis=1)
    pb = np.exp(log_pb)
    ratio = log_pb - log_pa
    row_kl = np.sum(pb * ratio, axis=1, keepdims=True)
    return pb * (ratio - row_kl) * (t / n)


# -- feature pooling ----------------------------------------------------------------

def pool_features(x: np.ndarray) -> np.ndarray:
    """Global average pool plus global max pool.

    Accepts ``N x C`` vectors (treated as a 1x1 grid, so the result is 2x)
    or ``N x C x H x W`` grids.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x + x
    if x.ndim == 4:
        return x.mean(axis=(2, 3)) + x.max(axis=(2, 3))
    raise ShapeError(f"features must be 2-D or 4-D, got {x.shape}")


def pool_features_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return grad + grad
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    out = np.broadcast_to(grad[:, :, None] / (h * w), flat.shape).copy()
    arg = flat.argmax(axis=2)
    out[np.arange(n)[:, None], np.arange(c)[None, :], arg] += grad
    return out.reshape(x.shape)


# -- the complete self-distillation objective -----------------------------------------

def _scale_aux(aux: dict, c: float) -> dict:
    return {k: v * c for k, v in aux.items()}


def s2sd_teacher(penultimate_features: np.ndarray, target_heads: Sequence[MLPHead],
                 head_inputs: Sequence[np.ndarray] | None = None) -> dict:
    """The detached similarity matrices (per target branch, and of the pooled features)."""
    pooled = pool_features(penultimate_features)
    mats = []
    for b, head in enumerate(target_heads):
        x = pooled if head_inputs is None else head_inputs[b]
        t, _ = normalize_rows(forward(head, x)[0])
        mats.append(t @ t.T)
    f, _ = normalize_rows(pooled)
    return {"targets": mats, "features": f @ f.T}


def s2sd_loss(ref_embeddings: np.ndarray, penultimate_features: np.ndarray, labels: np.ndarray,
              target_heads: Sequence[MLPHead], base_criterion: Criterion, cfg: S2SDConfig, iteration: int,
              target_criteria: Sequence[Criterion] | None = None, *, teacher: dict | None = None,
              head_inputs: Sequence[np.ndarray] | None = None) -> LossOutput:
    """Multiscale self-distillation objective on raw (unnormalised) reference embeddings.

    total = (base + w * mean(target losses)) / 2 + gamma * mean(KL(base || target))
            [+ gamma * KL(base || pooled features) once iteration >= warmup_iters]

    With no target heads the first part is just the base loss. Target and
    feature similarity matrices act as constants (detached) for the KL terms
    unless ``cfg.detach_targets`` is off. ``teacher`` (keys ``targets`` and
    ``features``, either may be None) overrides those matrices with
    precomputed ones; ``head_inputs`` overrides the pooled
    features fed to each head.

    ``aux_grads`` holds ``features`` (d/d penultimate_features),
    ``head_inputs``, ``head_params`` (per head, ``[dW0, db0, ...]``),
    ``target_distill`` (distillation gradient reaching each normalised target
    embedding), ``base`` and ``targets`` (criterion parameter gradients).
    """
    if iteration < 0:
        raise InvalidState(f"iteration must be >= 0, got {iteration}")
    ref = np.asarray(ref_embeddings, dtype=np.float64)
    feats = np.asarray(penultimate_features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = ref.shape
    if feats.shape[0] != n or labels.shape[0] != n:
        raise ShapeError("embeddings, features and labels disagree on batch size")
    heads = list(target_heads)
    if len(heads) != len(cfg.target_dims):
        raise ShapeError(f"{len(heads)} target heads for {len(cfg.target_dims)} target dims")
    for head, td in zip(heads, cfg.target_dims):
        if head.out_dim != td:
            raise ShapeError(f"target head outputs {head.out_dim}, config says {td}")
        if td <= d:
            raise ShapeError(f"target dim {td} must exceed reference dim {d}")
    crits = list(target_criteria) if target_criteria is not None else [base_criterion] * len(heads)
    if len(crits) != len(heads):
        raise ShapeError("one target criterion per target head required")
    if head_inputs is not None and len(head_inputs) != len(heads):
        raise ShapeError("one input per target head required")

    t = cfg.temperature
    n_b = len(heads)
    u, u_norm = normalize_rows(ref)
    base = base_criterion(u, labels)
    base_smat = u @ u.T
    pooled = pool_features(feats)

    base_coef = 0.5 if n_b else 1.0
    tgt_coef = 0.5 * cfg.target_weight / n_b if n_b else 0.0
    g_u = base_coef * base.grad_embeddings
    g_smat = None

    tgt_values, dist_values = [], []
    branch = []
    for b, (head, crit) in enumerate(zip(heads, crits)):
        x_b = pooled if head_inputs is None else np.asarray(head_inputs[b], dtype=np.float64)
        z_b, cache = forward(head, x_b)
        t_b, t_norm = normalize_rows(z_b)
        tl = crit(t_b, labels)
        trgt_smat = t_b @ t_b.T
        frozen = None if teacher is None else teacher.get("targets")
        teach = trgt_smat if frozen is None else frozen[b]
        kl, g_a = row_softmax_kl(base_smat, teach, t)
        tgt_values.append(tl.value)
        dist_values.append(kl)
        g_smat = (cfg.gamma / n_b) * g_a if g_smat is None else g_smat + (cfg.gamma / n_b) * g_a
        if cfg.detach_targets:
            g_distill = np.zeros_like(t_b)
        else:
            g_b = (cfg.gamma / n_b) * row_softmax_kl_grad_target(base_smat, trgt_smat, t)
            g_distill = (g_b + g_b.T) @ t_b
        branch.append((head, cache, t_b, t_norm, tl, g_distill))

    feat_value = None
    if cfg.use_feature_distill and iteration >= cfg.warmup_iters:
        if teacher is None or teacher.get("features") is None:
            f_unit, _ = normalize_rows(pooled)
            feat_smat = f_unit @ f_unit.T
        else:
            feat_smat = teacher["features"]
        feat_value, g_a = row_softmax_kl(base_smat, feat_smat, t)
        g_smat = cfg.gamma * g_a if g_smat is None else g_smat + cfg.gamma * g_a

    if n_b:
        total = 0.5 * (base.value + cfg.target_weight * float(np.mean(tgt_values)))
        total += cfg.gamma * float(np.mean(dist_values))
    else:
        total = base.value
    if feat_value is not None:
        total += cfg.gamma * feat_value

    if g_smat is not None:
        g_u = g_u + (g_smat + g_smat.T) @ u
    grad_ref = normalize_rows_backward(u, u_norm, g_u)

    d_pooled = np.zeros_like(pooled)
    head_params, head_in_grads, distill_grads, tgt_aux = [], [], [], []
    for head, cache, t_b, t_norm, tl, g_distill in branch:
        g_t = tgt_coef * tl.grad_embeddings + g_distill
        g_z = normalize_rows_backward(t_b, t_norm, g_t)
        p_grads, dx = backward(head, cache, g_z)
        head_params.append(p_grads)
        head_in_grads.append(dx)
        distill_grads.append(g_distill)
        tgt_aux.append(_scale_aux(tl.aux_grads, tgt_coef))
        if head_inputs is None:
            d_pooled += dx
    grad_feats = pool_features_backward(feats, d_pooled)

    return LossOutput(
        float(total),
        grad_ref,
        aux_grads={
            "features": grad_feats,
            "head_inputs": head_in_grads,
            "head_params": head_params,
            "target_distill": distill_grads,
            "base": _scale_aux(base.aux_grads, base_coef),
            "targets": tgt_aux,
        },
        terms={
            "base": base.value,
            "targets": tgt_values,
            "distill": dist_values,
            "feature_distill": feat_value,
        },
    )
