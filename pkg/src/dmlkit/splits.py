"""Train/test class splits of controlled FID, and the aggregated generalization score.

A sequence starts from an initial class partition, greedily swaps whole
classes between the two sides while the true FID keeps rising, then removes
the classes closest to the opposite side's mean until a data floor is hit.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .embed_store import EmbeddingSet, split_by_classes
from .errors import CannotSwap, DegenerateAxis, InsufficientData, InvalidState
from .fid import fid_between

log = logging.getLogger(__name__)

ACCEPT_EPS = 1e-9


class Halt(enum.Enum):
    CONVERGED = "converged"
    STOPPED = "stopped"


@dataclass(frozen=True)
class SplitState:
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]
    fid: float
    step: int = 0
    kind: str = "initial"
    n_train: int = 0
    n_test: int = 0

    def __post_init__(self):
        tr, te = tuple(sorted(self.train_classes)), tuple(sorted(self.test_classes))
        if not tr or not te:
            raise InvalidState("both sides need at least one class")
        if set(tr) & set(te):
            raise InvalidState(f"classes on both sides: {sorted(set(tr) & set(te))}")
        object.__setattr__(self, "train_classes", tr)
        object.__setattr__(self, "test_classes", te)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "kind": self.kind,
            "train_classes": list(self.train_classes),
            "test_classes": list(self.test_classes),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "fid": self.fid,
        }


@dataclass
class SplitSequence:
    states: list[SplitState] = field(default_factory=list)
    swap_size: int = 1
    retained_fraction_floor: float = 0.5
    total_samples: int = 0

    @property
    def fids(self) -> list[float]:
        return [s.fid for s in self.states]

    def to_manifest(self) -> dict:
        return {
            "swap_size": self.swap_size,
            "retained_fraction_floor": self.retained_fraction_floor,
            "total_samples": self.total_samples,
            "states": [s.to_dict() for s in self.states],
        }

    @classmethod
    def from_manifest(cls, doc: dict) -> "SplitSequence":
        states = [
            SplitState(
                tuple(s["train_classes"]), tuple(s["test_classes"]), float(s["fid"]),
                int(s["step"]), s["kind"], int(s.get("n_train", 0)), int(s.get("n_test", 0)),
            )
            for s in doc["states"]
        ]
        return cls(states, int(doc.get("swap_size", 1)),
                   float(doc.get("retained_fraction_floor", 0.5)), int(doc.get("total_samples", 0)))


def _side_means(es: EmbeddingSet):
    idx = es.class_index()
    return idx.class_ids, idx.class_means, es.data.mean(axis=0)


def _argmax_by_id(ids: np.ndarray, scores: np.ndarray) -> int:
    # ids arrive sorted; np.argmax returns the first maximum, i.e. the smallest id
    return int(ids[int(np.argmax(scores))])


def select_swap_pair(train: EmbeddingSet, test: EmbeddingSet, direction: int = 1) -> tuple[int, int]:
    """Pick the train and test class whose exchange should most raise the FID.

    A train class scores ``|mu_c - mu_train| - |mu_c - mu_test|`` (and
    symmetrically for the test side), using only class and split means.
    ``direction=-1`` picks the classes that should most lower it instead.
    """
    tr_ids, tr_means, mu_tr = _side_means(train)
    te_ids, te_means, mu_te = _side_means(test)
    if len(tr_ids) < 2 or len(te_ids) < 2:
        raise CannotSwap("each side needs at least two classes to swap")
    tr_score = np.linalg.norm(tr_means - mu_tr, axis=1) - np.linalg.norm(tr_means - mu_te, axis=1)
    te_score = np.linalg.norm(te_means - mu_te, axis=1) - np.linalg.norm(te_means - mu_tr, axis=1)
    return _argmax_by_id(tr_ids, direction * tr_score), _argmax_by_id(te_ids, direction * te_score)


def _state_for(data: EmbeddingSet, train: Iterable[int], test: Iterable[int], step: int, kind: str) -> SplitState:
    train, test = sorted(train), sorted(test)
    keep = np.isin(data.labels, train + test)
    sub = data if keep.all() else data.subset(np.flatnonzero(keep))
    tr, te = split_by_classes(sub, train)
    return SplitState(tuple(train), tuple(test), fid_between(tr, te), step, kind, tr.n, te.n)


def initial_state(data: EmbeddingSet, train_classes: Iterable[int]) -> SplitState:
    train = sorted({int(c) for c in train_classes})
    test = sorted(set(data.classes.tolist()) - set(train))
    return _state_for(data, train, test, 0, "initial")


def swap_step(state: SplitState, data: EmbeddingSet, swap_size: int = 1, direction: int = 1) -> SplitState | Halt:
    """Exchange ``swap_size`` class pairs, re-selecting after each exchange.

    The candidate is kept only if the true FID moves in ``direction`` by more
    than ``ACCEPT_EPS``; otherwise the swap phase has converged.
    """
    train, test = set(state.train_classes), set(state.test_classes)
    sub = data.subset(np.flatnonzero(np.isin(data.labels, sorted(train | test))))
    for _ in range(swap_size):
        tr, te = split_by_classes(sub, train)
        c_tr, c_te = select_swap_pair(tr, te, direction)
        train.remove(c_tr)
        test.remove(c_te)
        train.add(c_te)
        test.add(c_tr)
    cand = _state_for(sub, train, test, state.step + 1, "swap")
    if direction * (cand.fid - state.fid) > ACCEPT_EPS:
        return cand
    return Halt.CONVERGED


def removal_step(state: SplitState, data: EmbeddingSet, retained_fraction_floor: float = 0.5,
                 original_count: int | None = None) -> SplitState | Halt:
    """Drop the train class nearest the test mean and the test class nearest the train mean."""
    original = data.n if original_count is None else original_count
    if len(state.train_classes) <= 2 or len(state.test_classes) <= 2:
        return Halt.STOPPED
    sub = data.subset(np.flatnonzero(np.isin(data.labels, state.train_classes + state.test_classes)))
    tr, te = split_by_classes(sub, state.train_classes)
    tr_ids, tr_means, mu_tr = _side_means(tr)
    te_ids, te_means, mu_te = _side_means(te)
    drop_tr = int(tr_ids[int(np.argmin(np.linalg.norm(tr_means - mu_te, axis=1)))])
    drop_te = int(te_ids[int(np.argmin(np.linalg.norm(te_means - mu_tr, axis=1)))])
    removed = int(np.isin(sub.labels, [drop_tr, drop_te]).sum())
    if sub.n - removed < retained_fraction_floor * original:
        return Halt.STOPPED
    train = [c for c in state.train_classes if c != drop_tr]
    test = [c for c in state.test_classes if c != drop_te]
    new = _state_for(sub, train, test, state.step + 1, "removal")
    if new.fid < state.fid:
        log.info("removal step %d lowered FID %.4f -> %.4f", new.step, state.fid, new.fid)
    return new


def random_half(data: EmbeddingSet, seed: int = 0) -> list[int]:
    ids = data.classes
    rng = np.random.default_rng(seed)
    return sorted(rng.permutation(ids)[: len(ids) // 2].tolist())


def first_half(data: EmbeddingSet) -> list[int]:
    ids = data.classes
    return ids[: len(ids) // 2].tolist()


def build_split_sequence(data: EmbeddingSet, initial_train: Iterable[int] | None = None, swap_size: int = 1,
                         seed: int = 0, retained_fraction_floor: float = 0.5, direction: int = 1,
                         max_swaps: int = 10_000, with_removal: bool | None = None) -> SplitSequence:
    """Swap to convergence, then remove classes until the retention floor.

    ``initial_train=None`` draws a random half of the classes from ``seed``;
    otherwise the run is fully deterministic and ``seed`` is unused.
    Removal is skipped for FID-lowering runs (``direction=-1``) unless
    ``with_removal`` forces it.
    """
    if swap_size < 1:
        raise ValueError("swap_size must be >= 1")
    if not 0 < retained_fraction_floor <= 1:
        raise ValueError("retained_fraction_floor must be in (0, 1]")
    if initial_train is None:
        initial_train = random_half(data, seed)
    state = initial_state(data, initial_train)
    seq = SplitSequence([state], swap_size, retained_fraction_floor, data.n)
    if min(len(state.train_classes), len(state.test_classes)) >= 2:
        for _ in range(max_swaps):
            nxt = swap_step(state, data, swap_size, direction)
            if nxt is Halt.CONVERGED:
                break
            seq.states.append(nxt)
            state = nxt
    if with_removal is None:
        with_removal = direction > 0
    while with_removal:
        nxt = removal_step(state, data, retained_fraction_floor, data.n)
        if nxt is Halt.STOPPED:
            break
        seq.states.append(nxt)
        state = nxt
    return seq


# -- aggregated generalization score ---------------------------------------------

@dataclass(frozen=True)
class AGSInput:
    fids: tuple[float, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        fids = tuple(float(f) for f in self.fids)
        scores = tuple(float(s) for s in self.scores)
        if len(fids) != len(scores):
            raise ValueError(f"{len(fids)} FIDs but {len(scores)} scores")
        if len(fids) < 2:
            raise InsufficientData("AGS needs at least two (fid, score) points")
        if len(set(fids)) != len(fids):
            raise DegenerateAxis("duplicate FID values")
        if any(not 0.0 <= s <= 1.0 for s in scores):
            raise ValueError("scores must lie in [0, 1]")
        object.__setattr__(self, "fids", fids)
        object.__setattr__(self, "scores", scores)


def ags(inp: AGSInput | tuple[Sequence[float], Sequence[float]]) -> float:
    """Trapezoidal area under (min-max normalised FID, score)."""
    if not isinstance(inp, AGSInput):
        inp = AGSInput(*inp)
    f = np.asarray(inp.fids)
    s = np.asarray(inp.scores)
    order = np.argsort(f)
    f, s = f[order], s[order]
    x = (f - f[0]) / (f[-1] - f[0])
    return float(np.trapezoid(s, x))

