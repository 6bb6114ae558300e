import numpy as np
import pytest

from dmlkit.embed_store import SynthSpec, synth_gaussian_classes
from dmlkit.errors import InsufficientSupport, NonFinite, ShapeError
from dmlkit.losses import S2SDConfig
from dmlkit.mlp import MLPHead, backward, forward
from dmlkit.trainer import (
    AdamState,
    EpisodeSpec,
    TrainConfig,
    adam_step,
    evaluate,
    few_shot_adapt,
    make_ood_task,
    train,
)
from dmlkit.trainer.fewshot import adapt_last_layer, sample_episode
from dmlkit.trainer.gradcheck import numeric_grad, rel_error
from dmlkit.trainer.training import class_balanced_batch


def test_forward_identity_and_zero():
    x = np.random.default_rng(0).standard_normal((4, 3))
    assert np.array_equal(MLPHead([np.eye(3)], [np.zeros(3)])(x), x)
    zero = MLPHead([np.zeros((3, 5)), np.zeros((5, 2))], [np.zeros(5), np.zeros(2)])
    assert not zero(x).any()
    with pytest.raises(ShapeError):
        forward(zero, np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        MLPHead([np.zeros((3, 5)), np.zeros((4, 2))], [np.zeros(5), np.zeros(2)])


def test_backward_linear_head():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 3))
    head = MLPHead([rng.standard_normal((3, 3))], [np.zeros(3)])
    _, cache = forward(head, x)
    (dw, db), dx = backward(head, cache, np.eye(3))
    assert np.array_equal(dw, x.T)
    assert np.array_equal(db, np.ones(3))
    np.testing.assert_array_equal(dx, head.weights[0].T)
    grads, dx = backward(head, cache, np.zeros((3, 3)))
    assert not dx.any() and not any(g.any() for g in grads)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    head = MLPHead.init([4, 6, 5, 3], rng)
    for b in head.biases:
        b += 0.3
    x = rng.standard_normal((7, 4))
    w = rng.standard_normal((7, 3))
    _, cache = forward(head, x)
    grads, dx = backward(head, cache, w)

    def f():
        return float(np.sum(w * head(x)))

    got = np.concatenate([g.ravel() for g in grads])
    assert rel_error(got, numeric_grad(f, head.params())) < 1e-7
    assert rel_error(dx, numeric_grad(f, x)) < 1e-7


def test_adam_first_step_and_zero_grads():
    p = np.array([0.5])
    adam_step(AdamState(lr=0.01, weight_decay=0.0), [p], [np.array([1.0])])
    assert abs((p[0] - 0.5) + 0.01 * 1.0 / (1.0 + 1e-8)) < 1e-6
    q = np.array([1.0, -2.0])
    st = AdamState(lr=0.01, weight_decay=0.0)
    for _ in range(5):
        adam_step(st, [q], [np.zeros(2)])
    assert q.tolist() == [1.0, -2.0]


def test_adam_zero_lr_and_non_finite():
    q = np.array([3.0])
    adam_step(AdamState(lr=0.0), [q], [np.array([5.0])])
    assert q[0] == 3.0
    with pytest.raises(NonFinite):
        adam_step(AdamState(), [q], [np.array([np.nan])])
    with pytest.raises(ShapeError):
        adam_step(AdamState(), [q], [np.zeros(2)])


def test_adam_quadratic_bowl():
    rng = np.random.default_rng(0)
    a = np.diag([1.0, 10.0, 0.3])
    x = rng.standard_normal(3) * 3
    st = AdamState(lr=0.05, weight_decay=0.0)
    losses = []
    for _ in range(100):
        losses.append(0.5 * x @ a @ x)
        adam_step(st, [x], [a @ x])
    windows = np.array(losses).reshape(10, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_class_balanced_batch():
    labels = np.repeat(np.arange(8), 25)
    rows = class_balanced_batch(labels, 32, np.random.default_rng(0))
    counts = np.bincount(labels[rows], minlength=8)
    assert len(rows) == 32 and set(counts) == {4}


@pytest.fixture(scope="module")
def synth8():
    return synth_gaussian_classes(SynthSpec(8, 25, 16, within_class_std=1.0, seed=0))


def test_training_is_deterministic(synth8):
    cfg = TrainConfig(epochs=3, seed=4, eval_every=1)
    a, b = train(synth8, cfg), train(synth8, cfg)
    assert a.history == b.history
    for x, y in zip(a.reference.params(), b.reference.params()):
        assert np.array_equal(x, y)


def test_training_improves_train_recall():
    gains = []
    for seed in range(3):
        es = synth_gaussian_classes(SynthSpec(8, 25, 16, within_class_std=1.0, seed=seed))
        hist = train(es, TrainConfig(epochs=30, seed=seed)).history
        gains.append(hist[-1]["recall@1"] - hist[0]["recall@1"])
    assert np.mean(gains) > 0


def test_history_layout(synth8):
    hist = train(synth8, TrainConfig(epochs=4, eval_every=2, objective="s2sd")).history
    assert [h["epoch"] for h in hist] == [0, 1, 2, 3, 4]
    assert hist[0]["loss"] is None and "recall@1" in hist[0]
    assert "recall@1" not in hist[1] and "recall@1" in hist[2] and "recall@1" in hist[4]
    assert all("distill" in h for h in hist[1:])


@pytest.mark.parametrize("base", ["margin", "multisim"])
def test_s2sd_reduction_gives_identical_history(synth8, base):
    plain = TrainConfig(epochs=5, seed=3, eval_every=5, objective=base)
    reduced = TrainConfig(epochs=5, seed=3, eval_every=5, objective="s2sd", base_objective=base,
                          s2sd=S2SDConfig(gamma=0.0, target_dims=(), use_feature_distill=False))
    assert train(synth8, plain).history == train(synth8, reduced).history


def test_head_warmup_freezes_reference_for_one_epoch(synth8):
    cfg = TrainConfig(epochs=1, objective="s2sd", head_warmup=True)
    res = train(synth8, cfg)
    fresh = train(synth8, TrainConfig(epochs=0, objective="s2sd"))
    for x, y in zip(res.reference.params(), fresh.reference.params()):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_s2sd_distillation_term_shrinks(seed):
    es = synth_gaussian_classes(SynthSpec(8, 25, 16, within_class_std=1.0, seed=seed))
    hist = train(es, TrainConfig(epochs=30, objective="s2sd", seed=seed)).history
    assert hist[-1]["distill"] < hist[1]["distill"]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(objective="triplet")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)
    with pytest.raises(ValueError):
        TrainConfig(eval_every=0)


def test_ood_task_layout():
    tr, te = make_ood_task(seed=1)
    assert (tr.n, te.n, tr.dim) == (200, 200, 16)
    assert tr.classes.tolist() == list(range(8)) and te.classes.tolist() == list(range(8, 16))
    assert te.data[:, :4].mean() - tr.data[:, :4].mean() == pytest.approx(1.5, abs=0.4)


def test_evaluate_keys(synth8):
    head = MLPHead.init([16, 8, 4], np.random.default_rng(0))
    out = evaluate(head, synth8)
    assert set(out) == {"recall@1", "map@1000", "nmi", "pi_ratio", "spectral_decay"}


@pytest.fixture(scope="module")
def trained_ood():
    tr, te = make_ood_task(seed=0)
    return train(tr, TrainConfig(epochs=20, seed=0)).reference, te


def test_fewshot_zero_epochs_is_identity(trained_ood):
    head, te = trained_ood
    res = few_shot_adapt(head, te, EpisodeSpec(adapt_epochs=0, episodes=3))
    for z, a in zip(res.zero_shot, res.adapted):
        assert z.to_dict() == a.to_dict()


def test_fewshot_boundary_one_query_per_class(trained_ood):
    head, te = trained_ood
    res = few_shot_adapt(head, te, EpisodeSpec(shots=24, episodes=2, adapt_epochs=5))
    assert len(res.zero_shot) == 2
    for rep in res.adapted:
        assert 0.0 <= rep.recall_at[1] <= 1.0
    sup, qry = sample_episode(te, 24, np.random.default_rng(0))
    assert np.array_equal(np.bincount(te.labels[qry])[8:], np.ones(8, int))
    assert not set(sup) & set(qry)


def test_fewshot_insufficient_support(trained_ood):
    head, te = trained_ood
    with pytest.raises(InsufficientSupport) as exc:
        few_shot_adapt(head, te, EpisodeSpec(shots=25))
    assert exc.value.class_id == 8


def test_fewshot_adaptation_only_touches_last_layer(trained_ood):
    head, te = trained_ood
    tuned = adapt_last_layer(head, te, EpisodeSpec(adapt_epochs=3), np.random.default_rng(0))
    assert np.array_equal(tuned.weights[0], head.weights[0])
    assert not np.array_equal(tuned.weights[-1], head.weights[-1])
