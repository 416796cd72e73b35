import numpy as np
import pytest
from scipy.special import expit

from fairij.config import FairnessMetricKind
from fairij.errors import EvaluationError
from fairij.fairness import group_stats, hard_metric, metric_report, surrogate, surrogate_grad, surrogate_grad_info
from fairij.oracle import finite_diff_check
from tests.conftest import biased_mixture, logistic, make_dataset, random_model

DP, EO, EQOPP = FairnessMetricKind.DP, FairnessMetricKind.EO, FairnessMetricKind.EQOPP


def balanced_cells():
    """Two instances per (s, y) cell; feature 0 equals s."""
    s = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    y = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    x = np.column_stack([s, np.arange(8) / 8.0])
    return make_dataset(x, y, s)


def test_constant_predictor_is_fair():
    data = balanced_cells()
    model = logistic([0.0, 0.0], 3.0)
    for kind in (DP, EO, EQOPP):
        assert hard_metric(model, data, kind) == 0.0
        assert surrogate(model, data, kind) == 0.0


def test_perfectly_unfair_predictor():
    data = balanced_cells()
    model = logistic([100.0, 0.0], -50.0)
    assert hard_metric(model, data, DP) == 1.0
    assert hard_metric(model, data, EO) == 2.0
    assert hard_metric(model, data, EQOPP) == 1.0


def test_hand_computed_equalized_odds():
    data = balanced_cells()
    model = logistic([0.0, 4.0], -1.5)
    p = expit(4.0 * data.features[:, 1] - 1.5)
    hard = (p >= 0.5).astype(float)
    expected = sum(
        abs(hard[(data.sensitive == 1) & (data.labels == y)].mean() - hard[(data.sensitive == 0) & (data.labels == y)].mean())
        for y in (0, 1)
    )
    assert hard_metric(model, data, EO) == pytest.approx(expected)


def test_surrogate_on_six_points():
    x = np.array([[-1.0], [0.0], [1.0], [0.5], [1.5], [2.0]])
    s = np.array([0, 0, 0, 1, 1, 1])
    data = make_dataset(x, [0, 1, 0, 1, 0, 1], s)
    model = logistic([1.2], -0.3)
    p = expit(1.2 * x[:, 0] - 0.3)
    assert surrogate(model, data, DP) == pytest.approx(abs(p[3:].mean() - p[:3].mean()), rel=1e-12)


def test_identical_groups_are_degenerate():
    x = np.array([[0.1], [0.7], [0.1], [0.7]])
    data = make_dataset(x, [0, 1, 0, 1], [0, 0, 1, 1])
    model = logistic([2.0], 0.3)
    assert surrogate(model, data, DP) == 0.0
    info = surrogate_grad_info(model, data, DP)
    assert info.degenerate
    np.testing.assert_array_equal(info.grad.values, 0.0)


@pytest.mark.parametrize("kind", [DP, EO, EQOPP])
@pytest.mark.parametrize("seed", range(8))
def test_surrogate_grad_matches_finite_differences(kind, seed):
    data = biased_mixture(40, seed=seed)
    model = random_model(3, [4], seed=seed, spread=2.0)
    info = surrogate_grad_info(model, data, kind)
    assert not info.degenerate

    def f(params):
        return surrogate(model.with_params(params), data, kind)

    assert finite_diff_check(f, info.grad, model.params) <= 1e-5


def test_flipping_sensitive_encoding_keeps_gradient():
    data = biased_mixture(30, seed=1)
    flipped = make_dataset(data.features, data.labels, 1 - data.sensitive)
    model = random_model(3, [3], seed=1)
    original = surrogate_grad_info(model, data, DP)
    swapped = surrogate_grad_info(model, flipped, DP)
    assert original.differences["all"] == pytest.approx(-swapped.differences["all"])
    np.testing.assert_allclose(original.grad.values, swapped.grad.values, rtol=1e-12, atol=1e-15)
    assert surrogate(model, data, EO) == pytest.approx(surrogate(model, flipped, EO), rel=1e-12)


def test_surrogate_is_order_invariant():
    data = biased_mixture(30, seed=2)
    perm = np.random.default_rng(0).permutation(len(data))
    shuffled = data.subset(perm)
    model = random_model(3, [3], seed=2)
    for kind in (DP, EO):
        assert surrogate(model, data, kind) == pytest.approx(surrogate(model, shuffled, kind), rel=1e-12)


def test_metric_bounds():
    data = biased_mixture(60, seed=4)
    model = random_model(3, [5], seed=4, spread=3.0)
    dp, eo, eqopp = (hard_metric(model, data, k) for k in (DP, EO, EQOPP))
    assert 0.0 <= dp <= 1.0
    assert 0.0 <= eo <= 2.0
    assert eqopp <= eo


def test_constant_model_has_zero_gradient():
    data = balanced_cells()
    model = logistic([0.0, 0.0], 0.2)
    np.testing.assert_array_equal(surrogate_grad(model, data, EO).values, 0.0)


def test_empty_cell_is_named():
    data = make_dataset([[0.0], [1.0], [2.0]], [0, 1, 1], [0, 0, 1])
    model = logistic([1.0], 0.0)
    assert hard_metric(model, data, DP) >= 0.0
    with pytest.raises(EvaluationError, match="s=1,y=0"):
        hard_metric(model, data, EO)
    with pytest.raises(EvaluationError):
        surrogate(model, make_dataset([[0.0], [1.0]], [0, 1], [0, 0]), DP)


def test_group_stats_and_report():
    data = balanced_cells()
    model = logistic([0.0, 4.0], -1.5)
    stats = group_stats(model, data)
    assert sum(count for count, _ in stats.cells.values()) == len(data)
    assert all(0.0 <= mean <= 1.0 for _, mean in stats.cells.values())
    report = metric_report(model, data, EO)
    payload = report.to_dict()
    assert payload["kind"] == "eo"
    assert payload["hard"] == hard_metric(model, data, EO)
    assert len(payload["group_cells"]["cells"]) == 4
