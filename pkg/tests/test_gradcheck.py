import numpy as np
import pytest

from dmlkit.trainer.gradcheck import (
    KINK_SLACK,
    REGISTRY,
    Problem,
    grad_check,
    numeric_grad,
    rel_error,
)


def test_linear_regression_is_essentially_exact():
    rep = grad_check("linear_regression", trials=10)
    assert rep.worst() < 1e-8
    assert rep.passed() and rep.rejected == 0


@pytest.mark.parametrize("name", ["margin", "multisim", "row_softmax_kl", "mlp_margin"])
def test_cheap_objectives_pass(name):
    rep = grad_check(name, trials=5, seed=1)
    assert rep.passed(1e-5), rep.to_dict()
    assert set(rep.max_rel_error) == set(REGISTRY[name](np.random.default_rng(0)).blocks)


def test_kinked_draws_are_rejected(monkeypatch):
    calls = {"n": 0}

    def flaky(rng):
        calls["n"] += 1
        x = np.array([1.0])
        slack = 0.0 if calls["n"] % 2 else np.inf      # every other draw sits on a kink
        return Problem({"x": x}, lambda: float(x @ x), lambda: {"x": 2 * x}, slack)

    monkeypatch.setitem(REGISTRY, "flaky", flaky)
    rep = grad_check("flaky", trials=3)
    assert rep.rejected == 3 and rep.passed()
    assert KINK_SLACK > 0


def test_always_kinked_objective_reports_failure(monkeypatch):
    monkeypatch.setitem(REGISTRY, "stuck", lambda rng: Problem({}, lambda: 0.0, lambda: {}, 0.0))
    rep = grad_check("stuck", trials=1)
    assert rep.failures and not rep.passed()


def test_wrong_gradient_is_caught(monkeypatch):
    def bad(rng):
        x = rng.standard_normal(3)
        return Problem({"x": x}, lambda: float(np.sum(x ** 3)), lambda: {"x": 2 * x ** 2})

    monkeypatch.setitem(REGISTRY, "bad", bad)
    assert not grad_check("bad", trials=2).passed()


def test_unknown_objective():
    with pytest.raises(KeyError):
        grad_check("nope")


def test_numeric_grad_list_block_and_rel_error():
    a, b = np.array([1.0, 2.0]), np.array([[3.0]])
    g = numeric_grad(lambda: float(a @ a + 2 * b.sum()), [a, b])
    np.testing.assert_allclose(g, [2.0, 4.0, 2.0], atol=1e-8)
    assert rel_error(np.zeros(2), np.zeros(2)) == 0.0
    assert rel_error(np.array([1.0]), np.array([0.0])) == 1.0
