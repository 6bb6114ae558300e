"""Few-shot adaptation episodes on unseen classes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..embed_store import EmbeddingSet
from ..errors import InsufficientSupport
from ..losses import MarginConfig, MarginObjective
from ..metrics import RetrievalReport, map_at, recall_at_k
from ..mlp import MLPHead, forward, normalize_rows, normalize_rows_backward
from .optim import AdamState, adam_step


@dataclass
class EpisodeSpec:
    shots: int = 5
    episodes: int = 10
    adapt_epochs: int = 50        # optimisation steps on the support set
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    margin: MarginConfig = field(default_factory=MarginConfig)

    def __post_init__(self):
        if self.shots < 1 or self.episodes < 1 or self.adapt_epochs < 0:
            raise ValueError("need shots >= 1, episodes >= 1 and adapt_epochs >= 0")


@dataclass
class FewShotResult:
    zero_shot: list[RetrievalReport]
    adapted: list[RetrievalReport]

    @staticmethod
    def _mean(reports, key):
        return float(np.mean([r.to_dict()[key] for r in reports]))

    def mean_zero_shot(self, key: str = "recall@1") -> float:
        return self._mean(self.zero_shot, key)

    def mean_adapted(self, key: str = "recall@1") -> float:
        return self._mean(self.adapted, key)

    def to_dict(self) -> dict:
        keys = self.zero_shot[0].to_dict().keys()
        return {
            "zero_shot": {k: self.mean_zero_shot(k) for k in keys},
            "adapted": {k: self.mean_adapted(k) for k in keys},
            "episodes": [
                {"zero_shot": z.to_dict(), "adapted": a.to_dict()} for z, a in zip(self.zero_shot, self.adapted)
            ],
        }


def _report(head: MLPHead, query: EmbeddingSet) -> RetrievalReport:
    es = query.with_data(normalize_rows(forward(head, query.data)[0])[0])
    rep = recall_at_k(es, [1]) if es.n > 1 else RetrievalReport({1: 0.0})
    rep.map_at[1000] = map_at(es, 1000)
    return rep


def sample_episode(data: EmbeddingSet, shots: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of (support, query); ``shots`` support rows per class."""
    support = []
    for cid, rows in zip(*_groups(data)):
        if len(rows) <= shots:
            raise InsufficientSupport(int(cid), len(rows), shots)
        support.append(np.sort(rng.choice(rows, size=shots, replace=False)))
    support = np.concatenate(support)
    query = np.setdiff1d(np.arange(data.n), support)
    return support, query


def _groups(data: EmbeddingSet):
    idx = data.class_index()
    return idx.class_ids, idx.row_groups


def adapt_last_layer(head: MLPHead, support: EmbeddingSet, spec: EpisodeSpec, rng: np.random.Generator) -> MLPHead:
    """Fine-tune only the final affine layer with the margin loss."""
    adapted = head.copy()
    if spec.adapt_epochs == 0:
        return adapted
    _, cache = forward(adapted, support.data)
    hidden = cache.penultimate     # frozen lower layers
    crit = MarginObjective(int(support.labels.max()) + 1, spec.margin, rng)
    w, b = adapted.weights[-1], adapted.biases[-1]
    opt = AdamState(lr=spec.lr, weight_decay=spec.weight_decay)
    opt_beta = AdamState(lr=spec.margin.beta_lr, weight_decay=0.0)
    for _ in range(spec.adapt_epochs):
        z = hidden @ w + b
        u, norms = normalize_rows(z)
        lo = crit(u, support.labels)
        g_z = normalize_rows_backward(u, norms, lo.grad_embeddings)
        adam_step(opt, [w, b], [hidden.T @ g_z, g_z.sum(axis=0)])
        adam_step(opt_beta, crit.parameters(), [lo.aux_grads["betas"]])
    return adapted


def few_shot_adapt(head: MLPHead, test_data: EmbeddingSet, spec: EpisodeSpec) -> FewShotResult:
    """Zero-shot vs adapted retrieval on the query remainder of each episode."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.episodes)
    zero, adapted = [], []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        sup, qry = sample_episode(test_data, spec.shots, rng)
        query = test_data.subset(qry)
        zero.append(_report(head, query))
        tuned = adapt_last_layer(head, test_data.subset(sup), spec, rng)
        adapted.append(_report(tuned, query))
    return FewShotResult(zero, adapted)
