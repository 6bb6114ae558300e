"""Finite-difference validation of the hand-written gradients.

Each registered objective draws a random problem, exposes its inputs as
named blocks, and returns analytic gradients per block. The harness
compares them with central differences and records the normwise relative
error ``|g - g_fd| / max(|g|, |g_fd|)`` per block. Draws that land within
``KINK_SLACK`` of a non-differentiable point (hinge, mining threshold,
ReLU) are rejected and redrawn.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..losses import (
    MarginConfig,
    MarginObjective,
    MultisimConfig,
    MultisimObjective,
    S2SDConfig,
    margin_loss,
    margin_slack,
    multisim_loss,
    multisim_slack,
    pool_features,
    row_softmax_kl,
    row_softmax_kl_grad_target,
    s2sd_loss,
    s2sd_teacher,
    sample_pairs,
)
from ..mlp import MLPHead, backward, forward, normalize_rows, normalize_rows_backward

STEP = 1e-6
KINK_SLACK = 1e-3
MAX_REDRAWS = 200


@dataclass
class Problem:
    blocks: dict[str, np.ndarray | list[np.ndarray]]   # a block may span several arrays
    value: Callable[[], float]              # reads the (mutated) blocks
    grads: Callable[[], dict[str, np.ndarray]]
    slack: float = np.inf                   # distance to the nearest kink


@dataclass
class GradCheckReport:
    objective: str
    trials: int
    max_rel_error: dict[str, float] = field(default_factory=dict)
    rejected: int = 0
    failures: list[str] = field(default_factory=list)

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-5) -> bool:
        return not self.failures and self.worst() < tol

    def to_dict(self) -> dict:
        return {"objective": self.objective, "trials": self.trials, "max_rel_error": self.max_rel_error,
                "worst": self.worst(), "rejected": self.rejected, "failures": self.failures}


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def numeric_grad(f: Callable[[], float], x: np.ndarray | list[np.ndarray], h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbing ``x`` in place.

    A list of arrays is treated as one block; the result is then flat.
    """
    arrays = x if isinstance(x, list) else [x]
    out = []
    for a in arrays:
        g = np.zeros(a.shape)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out[0] if not isinstance(x, list) else np.concatenate([g.ravel() for g in out])


def _relu_slack(caches) -> float:
    pre = [np.abs(z).min() for c in caches for z in c.pre[:-1]]
    return float(min(pre, default=np.inf))


# -- registered objectives -----------------------------------------------------------

def _linear_regression(rng):
    x = rng.standard_normal((20, 5))
    y = rng.standard_normal(20)
    w = rng.standard_normal(5)

    def value():
        r = x @ w - y
        return float(r @ r / (2 * len(y)))

    return Problem({"w": w}, value, lambda: {"w": x.T @ (x @ w - y) / len(y)})


def _labels(rng, n, n_cls):
    return rng.permutation(np.arange(n) % n_cls)


def _margin(rng):
    n, d = 12, 4
    emb = rng.standard_normal((n, d))
    labels = _labels(rng, n, 3)
    cfg = MarginConfig()
    betas = cfg.beta_init + 0.2 * rng.standard_normal(3)
    pairs = sample_pairs(normalize_rows(emb)[0], labels, rng, cfg)

    def value():
        return margin_loss(normalize_rows(emb)[0], labels, betas, cfg, pairs).value

    def grads():
        u, norms = normalize_rows(emb)
        lo = margin_loss(u, labels, betas, cfg, pairs)
        return {"embeddings": normalize_rows_backward(u, norms, lo.grad_embeddings), "betas": lo.aux_grads["betas"]}

    slack = margin_slack(normalize_rows(emb)[0], labels, betas, cfg, pairs)
    return Problem({"embeddings": emb, "betas": betas}, value, grads, slack)


def _multisim(rng):
    n, d = 12, 4
    emb = rng.standard_normal((n, d))
    labels = _labels(rng, n, 3)
    cfg = MultisimConfig()

    def grads():
        u, norms = normalize_rows(emb)
        return {"embeddings": normalize_rows_backward(u, norms, multisim_loss(u, labels, cfg).grad_embeddings)}

    return Problem({"embeddings": emb}, lambda: multisim_loss(normalize_rows(emb)[0], labels, cfg).value, grads,
                   multisim_slack(normalize_rows(emb)[0], labels, cfg))


def _row_softmax_kl(rng):
    n = 7
    t = float(rng.uniform(0.5, 2.0))
    a = rng.standard_normal((n, n))
    b = rng.standard_normal((n, n))
    return Problem({"a": a, "b": b}, lambda: row_softmax_kl(a, b, t)[0],
                   lambda: {"a": row_softmax_kl(a, b, t)[1], "b": row_softmax_kl_grad_target(a, b, t)})


def _mlp_margin(rng):
    n = 12
    labels = _labels(rng, n, 3)
    head = MLPHead.init([5, 7, 4], rng)
    for b in head.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((n, 5))
    cfg = MarginConfig()
    out, cache = forward(head, x)
    pairs = sample_pairs(normalize_rows(out)[0], labels, rng, cfg)
    betas = np.full(3, cfg.beta_init)
    params = head.params()

    def value():
        return margin_loss(normalize_rows(head(x))[0], labels, betas, cfg, pairs).value

    def grads():
        z, c = forward(head, x)
        u, norms = normalize_rows(z)
        lo = margin_loss(u, labels, betas, cfg, pairs)
        g, dx = backward(head, c, normalize_rows_backward(u, norms, lo.grad_embeddings))
        return {"params": np.concatenate([v.ravel() for v in g]), "input": dx}

    slack = min(margin_slack(normalize_rows(out)[0], labels, betas, cfg, pairs), _relu_slack([cache]))
    return Problem({"params": params, "input": x}, value, grads, slack)


def _s2sd(rng, base: str = "margin", detach: bool = True):
    n, d, c = 12, 3, 5
    dims = (6, 8)
    labels = _labels(rng, n, 3)
    cfg = S2SDConfig(gamma=float(rng.uniform(0.5, 5.0)), temperature=float(rng.uniform(0.5, 2.0)),
                     target_dims=dims, warmup_iters=0, use_feature_distill=True, detach_targets=detach)
    ref = rng.standard_normal((n, d))
    feats = np.abs(rng.standard_normal((n, c))) + 0.05   # post-ReLU features
    heads = [MLPHead.init([c, td, td], rng) for td in dims]
    for h in heads:
        for b in h.biases:
            b += 0.1 * rng.standard_normal(b.shape)
    pooled = pool_features(feats)

    if base == "margin":
        mcfg = MarginConfig()
        betas = mcfg.beta_init + 0.1 * rng.standard_normal(3)

        def crit_for(u):
            obj = MarginObjective(3, mcfg, pairs=sample_pairs(u, labels, rng, mcfg))
            obj.betas = betas
            return obj

        base_crit = crit_for(normalize_rows(ref)[0])
        tgt_out = [normalize_rows(h(pooled))[0] for h in heads]
        tgt_crits = [crit_for(t) for t in tgt_out]
        slacks = [margin_slack(normalize_rows(ref)[0], labels, betas, mcfg, base_crit.pairs)]
        slacks += [margin_slack(t, labels, betas, mcfg, cr.pairs) for t, cr in zip(tgt_out, tgt_crits)]
    else:
        mscfg = MultisimConfig()
        base_crit = MultisimObjective(mscfg)
        tgt_crits = [base_crit] * len(heads)
        slacks = [multisim_slack(normalize_rows(ref)[0], labels, mscfg)]
        slacks += [multisim_slack(normalize_rows(h(pooled))[0], labels, mscfg) for h in heads]

    # Detached matrices are constants of the objective: freeze them at the draw point.
    frozen = s2sd_teacher(feats, heads)
    teacher = frozen if detach else {"targets": None, "features": frozen["features"]}
    params = [p for h in heads for p in h.params()]

    def run():
        return s2sd_loss(ref, feats, labels, heads, base_crit, cfg, 0, tgt_crits, teacher=teacher)

    def grads():
        lo = run()
        hp = np.concatenate([g.ravel() for per in lo.aux_grads["head_params"] for g in per])
        return {"reference": lo.grad_embeddings, "features": lo.aux_grads["features"], "head_params": hp}

    caches = [forward(h, pooled)[1] for h in heads]
    slack = min(min(slacks), _relu_slack(caches))
    return Problem({"reference": ref, "features": feats, "head_params": params}, lambda: run().value, grads, slack)


REGISTRY: dict[str, Callable[[np.random.Generator], Problem]] = {
    "linear_regression": _linear_regression,
    "margin": _margin,
    "multisim": _multisim,
    "row_softmax_kl": _row_softmax_kl,
    "mlp_margin": _mlp_margin,
    "s2sd": _s2sd,
    "s2sd_multisim": lambda rng: _s2sd(rng, base="multisim"),
    "s2sd_live_targets": lambda rng: _s2sd(rng, detach=False),
}


def grad_check(objective: str, trials: int = 20, seed: int = 0, h: float = STEP) -> GradCheckReport:
    """Compare analytic and central-difference gradients over ``trials`` draws."""
    if objective not in REGISTRY:
        raise KeyError(f"unknown objective {objective!r}; choose from {sorted(REGISTRY)}")
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(objective, trials)
    done = 0
    while done < trials:
        prob = REGISTRY[objective](rng)
        if prob.slack < KINK_SLACK:
            rep.rejected += 1
            if rep.rejected > MAX_REDRAWS * max(trials, 1):
                rep.failures.append("could not draw a kink-free problem")
                break
            continue
        analytic = prob.grads()
        for name, x in prob.blocks.items():
            fd = numeric_grad(prob.value, x, h)
            err = rel_error(np.asarray(analytic[name]).ravel(), np.asarray(fd).ravel())
            if not np.isfinite(err):
                rep.failures.append(f"trial {done}: non-finite error in block {name}")
            rep.max_rel_error[name] = max(rep.max_rel_error.get(name, 0.0), err)
        done += 1
    return rep
