"""End-to-end training of small embedding networks on labeled feature sets."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..embed_store import EmbeddingSet
from ..losses import (
    MarginConfig,
    MarginObjective,
    MultisimConfig,
    MultisimObjective,
    S2SDConfig,
    s2sd_loss,
)
from ..metrics import cluster_nmi, density, map_at, recall_at_k, spectral_decay
from ..mlp import MLPHead, backward, forward, normalize_rows, normalize_rows_backward
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

OBJECTIVES = ("margin", "multisim", "s2sd")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    objective: str = "margin"
    base_objective: str = "margin"     # criterion under s2sd
    embed_dim: int = 8
    hidden_dim: int = 32
    lr: float = 3e-3
    weight_decay: float = 3e-4
    eval_every: int = 10
    iters_per_epoch: int | None = None
    head_warmup: bool = False
    spectral_skip: int = 1
    margin: MarginConfig = field(default_factory=MarginConfig)
    multisim: MultisimConfig = field(default_factory=MultisimConfig)
    s2sd: S2SDConfig = field(default_factory=lambda: S2SDConfig(gamma=5.0, target_dims=(32, 64)))

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.base_objective not in ("margin", "multisim"):
            raise ValueError("base_objective must be margin or multisim")
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4")
        if self.epochs < 0 or self.eval_every < 1:
            raise ValueError("need epochs >= 0 and eval_every >= 1")


@dataclass
class TrainResult:
    reference: MLPHead
    target_heads: list[MLPHead]
    history: list[dict]
    config: TrainConfig

    def embed(self, x: np.ndarray) -> np.ndarray:
        return embed(self.reference, x)


def embed(head: MLPHead, x: np.ndarray) -> np.ndarray:
    """Unit-normalised embeddings of ``x``."""
    return normalize_rows(forward(head, x)[0])[0]


def evaluate(head: MLPHead, data: EmbeddingSet, seed: int = 0, spectral_skip: int = 1) -> dict:
    """Retrieval, clustering and structure metrics of ``head`` on ``data``."""
    es = data.with_data(embed(head, data.data))
    out = {"recall@1": recall_at_k(es, [1]).recall_at[1], "map@1000": map_at(es, 1000)}
    out["nmi"] = cluster_nmi(es, seed=seed).nmi
    try:
        out["pi_ratio"] = density(es)[2]
    except Exception:  # singleton classes or a single class
        out["pi_ratio"] = None
    try:
        out["spectral_decay"] = spectral_decay(es, min(spectral_skip, es.dim - 1))
    except Exception:
        out["spectral_decay"] = None
    return out


def class_balanced_batch(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Pick ``batch_size // 2`` classes (or all, if fewer) and fill evenly from each."""
    ids = np.unique(labels)
    n_cls = min(len(ids), max(2, batch_size // 2))
    chosen = np.sort(rng.choice(ids, size=n_cls, replace=False))
    per = max(2, batch_size // n_cls)
    rows = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        rows.append(rng.choice(members, size=per, replace=per > members.size))
    return np.concatenate(rows)


def _make_criterion(name: str, cfg: TrainConfig, num_classes: int, rng: np.random.Generator):
    if name == "margin":
        return MarginObjective(num_classes, cfg.margin, rng)
    return MultisimObjective(cfg.multisim)


def train(data: EmbeddingSet, cfg: TrainConfig, eval_data: EmbeddingSet | None = None) -> TrainResult:
    """Train a reference head (and target heads for s2sd) on ``data``.

    The reference network is ``input -> hidden (ReLU) -> embedding``; its
    hidden activations are the penultimate features that feed the target
    heads. History holds one record per epoch with the mean loss and, every
    ``eval_every`` epochs, metrics on ``eval_data`` (default: ``data``).
    Epoch 0 records the untrained network.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, batch_rng, crit_rng, tgt_rng = (np.random.default_rng(s) for s in seeds)
    eval_data = data if eval_data is None else eval_data
    num_classes = int(max(data.labels.max(), eval_data.labels.max())) + 1

    ref = MLPHead.init([data.dim, cfg.hidden_dim, cfg.embed_dim], init_rng)
    use_s2sd = cfg.objective == "s2sd"
    base_name = cfg.base_objective if use_s2sd else cfg.objective
    base_crit = _make_criterion(base_name, cfg, num_classes, crit_rng)
    heads: list[MLPHead] = []
    tgt_crits = []
    if use_s2sd:
        for td in cfg.s2sd.target_dims:
            heads.append(MLPHead.init([cfg.hidden_dim, td, td], init_rng))
            tgt_crits.append(_make_criterion(base_name, cfg, num_classes, tgt_rng))

    opt_ref = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt_heads = [AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay) for _ in heads]
    crit_params = [p for c in [base_crit, *tgt_crits] for p in c.parameters()]
    opt_crit = AdamState(lr=cfg.margin.beta_lr, weight_decay=0.0)

    iters = cfg.iters_per_epoch or max(1, data.n // cfg.batch_size)
    history = [{"epoch": 0, "loss": None, **evaluate(ref, eval_data, cfg.seed, cfg.spectral_skip)}]
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, distills = [], []
        freeze_ref = cfg.head_warmup and epoch == 1 and use_s2sd
        for _ in range(iters):
            rows = class_balanced_batch(data.labels, cfg.batch_size, batch_rng)
            xb, yb = data.data[rows], data.labels[rows]
            out, cache = forward(ref, xb)
            if use_s2sd:
                lo = s2sd_loss(out, cache.penultimate, yb, heads, base_crit, cfg.s2sd, it, tgt_crits)
                ref_grads, _ = backward(ref, cache, lo.grad_embeddings, penultimate_grad=lo.aux_grads["features"])
                crit_grads = [lo.aux_grads["base"].get("betas")] + [a.get("betas") for a in lo.aux_grads["targets"]]
                if lo.terms["distill"]:
                    distills.append(float(np.mean(lo.terms["distill"])))
                for head, opt, g in zip(heads, opt_heads, lo.aux_grads["head_params"]):
                    adam_step(opt, head.params(), g)
            else:
                u, norms = normalize_rows(out)
                lo = base_crit(u, yb)
                ref_grads, _ = backward(ref, cache, normalize_rows_backward(u, norms, lo.grad_embeddings))
                crit_grads = [lo.aux_grads.get("betas")]
            if not freeze_ref:
                adam_step(opt_ref, ref.params(), ref_grads)
            if crit_params:
                adam_step(opt_crit, crit_params, [g for g in crit_grads if g is not None])
            losses.append(lo.value)
            it += 1
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if distills:
            rec["distill"] = float(np.mean(distills))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rec.update(evaluate(ref, eval_data, cfg.seed, cfg.spectral_skip))
        history.append(rec)
        log.debug("epoch %d loss %.5f", epoch, rec["loss"])
    return TrainResult(ref, heads, history, cfg)


def make_ood_task(seed: int = 0, n_train_classes: int = 8, n_test_classes: int = 8, per_class: int = 25,
                  dim: int = 16, informative: int = 4, shift: float = 1.5, class_std: float = 0.25,
                  nuisance_std: float = 1.0, novel_scale: float = 1.0) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Synthetic zero-shot task with shifted test classes.

    Class identity lives in the first ``informative`` coordinates; the rest
    carry large class-independent noise. Test class means are drawn from a
    region shifted by ``shift`` along every informative axis, so test classes
    are disjoint from and out of distribution with the training classes.
    With ``novel_scale > 0`` test classes additionally get class-specific
    offsets, uniform in ``[-novel_scale, novel_scale]``, on the first
    ``informative`` nuisance coordinates: directions the training classes
    never use. Test labels continue after the training labels.
    """
    if dim < 2 * informative and novel_scale > 0:
        raise ValueError("novel directions need dim >= 2 * informative")
    rng = np.random.default_rng(seed)

    def block(n_cls, offset, novel, first_label):
        means = rng.uniform(-1.0, 1.0, size=(n_cls, informative)) + offset
        x = np.empty((n_cls * per_class, dim))
        sig = means[:, None, :] + class_std * rng.standard_normal((n_cls, per_class, informative))
        x[:, :informative] = sig.reshape(-1, informative)
        x[:, informative:] = nuisance_std * rng.standard_normal((n_cls * per_class, dim - informative))
        if novel > 0:
            off = rng.uniform(-novel, novel, size=(n_cls, informative))
            x[:, informative:2 * informative] += np.repeat(off, per_class, axis=0)
        labels = first_label + np.repeat(np.arange(n_cls), per_class)
        return EmbeddingSet(x, labels)

    return block(n_train_classes, 0.0, 0.0, 0), block(n_test_classes, shift, novel_scale, n_train_classes)
