import numpy as np
import pytest

from dmlkit.embed_store import EmbeddingSet, SynthSpec, split_by_classes, synth_gaussian_classes
from dmlkit.errors import CannotSwap, DegenerateAxis, InsufficientData, InvalidState
from dmlkit.fid import fid_between
from dmlkit.splits import (
    AGSInput,
    Halt,
    SplitSequence,
    SplitState,
    ags,
    build_split_sequence,
    initial_state,
    removal_step,
    select_swap_pair,
    swap_step,
)
from oracles import swap_pair_oracle, trapezoid_oracle

# offsets whose mean is zero, so each class mean is exactly its centre
CROSS = np.array([[0.5, 0.0], [-0.5, 0.0], [0.0, 0.5], [0.0, -0.5]])


def classes_at(centres, ids=None):
    ids = list(range(len(centres))) if ids is None else ids
    data = np.vstack([np.asarray(c, float) + CROSS for c in centres])
    return EmbeddingSet(data, np.repeat(ids, len(CROSS)))


def test_select_swap_pair_example():
    train = classes_at([(0, 0), (9, 9)], [0, 1])
    test = classes_at([(10, 10), (1, 1)], [2, 3])
    assert select_swap_pair(train, test) == (1, 3)


def test_select_swap_pair_ties_go_to_smaller_id():
    # mirror image across the line x = 0: both classes on a side score equally
    train = classes_at([(-1, 1), (-1, -1)], [4, 2])
    test = classes_at([(1, 1), (1, -1)], [7, 5])
    assert select_swap_pair(train, test) == (2, 5)


def test_select_swap_pair_needs_two_classes():
    with pytest.raises(CannotSwap):
        select_swap_pair(classes_at([(0, 0)], [0]), classes_at([(1, 1), (2, 2)], [1, 2]))


@pytest.mark.parametrize("seed", range(4))
def test_select_swap_pair_matches_exhaustive_oracle(seed):
    es = synth_gaussian_classes(SynthSpec(12, 10, 3, within_class_std=0.5, seed=seed))
    train_ids = list(np.random.default_rng(seed).permutation(12)[:6])
    tr, te = split_by_classes(es, set(train_ids))
    means_tr = {int(c): es.data[es.labels == c].mean(0) for c in tr.classes}
    means_te = {int(c): es.data[es.labels == c].mean(0) for c in te.classes}
    want = swap_pair_oracle(means_tr, means_te, tr.data.mean(0), te.data.mean(0))
    assert select_swap_pair(tr, te) == want


def test_crossed_classes_swap_raises_fid():
    # class 1 sits in the test region and class 3 in the train region
    es = classes_at([(0, 0), (10, 10), (0, 1), (1, 0), (10, 11), (0.5, 0.5)])
    state = initial_state(es, [0, 1, 2])
    nxt = swap_step(state, es)
    assert isinstance(nxt, SplitState)
    assert set(nxt.train_classes) == {0, 2, 5}
    tr, te = split_by_classes(es, set(nxt.train_classes))
    assert nxt.fid == pytest.approx(fid_between(tr, te), rel=1e-12)
    assert nxt.fid > state.fid


def test_swap_converged_configuration():
    es = classes_at([(0, 0), (0, 1), (10, 10), (10, 11)])
    state = initial_state(es, [0, 1])
    assert swap_step(state, es) is Halt.CONVERGED
    seq = build_split_sequence(es, [0, 1])
    assert seq.states == [state]


def test_removal_drops_class_at_opposite_mean_first():
    # train class 2 sits exactly at the test mean (10, 0)
    es = classes_at([(0, 0), (0, 2), (10, 0), (0, -2), (9, 1), (11, -1), (10, 3), (10, -3)])
    state = initial_state(es, [0, 1, 2, 3])
    nxt = removal_step(state, es, 0.1)
    assert 2 not in nxt.train_classes and nxt.kind == "removal"
    assert len(nxt.test_classes) == 3


def test_removal_floor_and_minimum_classes():
    es = classes_at([(0, 0), (0, 2), (0, 4), (10, 0), (10, 2), (10, 4)])
    state = initial_state(es, [0, 1, 2])
    assert removal_step(state, es, 0.9) is Halt.STOPPED
    small = initial_state(es, [0, 1])
    assert removal_step(small, es, 0.1) is Halt.STOPPED


def test_state_validation():
    with pytest.raises(InvalidState):
        SplitState((0, 1), (1, 2), 0.0)
    with pytest.raises(InvalidState):
        SplitState((), (1,), 0.0)


def test_removal_sequence_on_twenty_classes():
    es = synth_gaussian_classes(SynthSpec(20, 15, 4, seed=5))
    seq = build_split_sequence(es, seed=5)
    kinds = [s.kind for s in seq.states]
    assert kinds.count("removal") >= 1
    for s in seq.states:
        tr, te = split_by_classes(es.subset(np.flatnonzero(np.isin(es.labels, s.train_classes + s.test_classes))),
                                  set(s.train_classes))
        assert s.fid == pytest.approx(fid_between(tr, te), rel=1e-12)
        assert s.n_train + s.n_test >= 0.5 * es.n


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_build_sequence_monotone_and_deterministic(seed):
    es = synth_gaussian_classes(SynthSpec(12, 30, 8, seed=seed))
    seq = build_split_sequence(es, seed=seed)
    swaps = [s for s in seq.states if s.kind in ("initial", "swap")]
    assert len(swaps) >= 2
    assert all(b.fid > a.fid for a, b in zip(swaps, swaps[1:]))
    again = build_split_sequence(es, seed=seed)
    assert again.to_manifest() == seq.to_manifest()
    assert SplitSequence.from_manifest(seq.to_manifest()).to_manifest() == seq.to_manifest()


def test_lowering_direction_decreases_fid():
    es = synth_gaussian_classes(SynthSpec(12, 20, 4, seed=4))
    seq = build_split_sequence(es, seed=4, direction=-1)
    assert all(s.kind != "removal" for s in seq.states)
    assert all(b.fid < a.fid for a, b in zip(seq.states, seq.states[1:]))


def test_build_argument_errors():
    es = synth_gaussian_classes(SynthSpec(4, 5, 2))
    with pytest.raises(ValueError):
        build_split_sequence(es, swap_size=0)
    with pytest.raises(ValueError):
        build_split_sequence(es, retained_fraction_floor=0.0)


def test_ags_constant_and_linear():
    fids = [3.0, 10.0, 4.5, 7.0]
    assert ags((fids, [0.5] * 4)) == pytest.approx(0.5, abs=1e-15)
    lo, hi = min(fids), max(fids)
    lin = [1 - (f - lo) / (hi - lo) for f in fids]
    assert ags((fids, lin)) == pytest.approx(0.5, abs=1e-15)


def test_ags_affine_invariant_in_fid_and_matches_oracle():
    rng = np.random.default_rng(0)
    fids = rng.uniform(0, 100, 9)
    scores = rng.uniform(0, 1, 9)
    base = ags((fids, scores))
    assert base == pytest.approx(trapezoid_oracle(fids.tolist(), scores.tolist()), abs=1e-14)
    assert ags((3.5 * fids + 11, scores)) == pytest.approx(base, abs=1e-14)


def test_ags_errors():
    with pytest.raises(InsufficientData):
        ags(([1.0], [0.5]))
    with pytest.raises(DegenerateAxis):
        ags(([1.0, 1.0], [0.5, 0.4]))
    with pytest.raises(ValueError):
        AGSInput((1.0, 2.0), (0.5,))
    with pytest.raises(ValueError):
        ags(([1.0, 2.0], [0.5, 67.0]))
