import numpy as np
import pytest
from scipy.stats import spearmanr

from fairij.config import FairnessMetricKind, IhvpConfig, MlpArchitecture, TrainConfig
from fairij.errors import CapacityError, ConvergenceError, InputError
from fairij.fairness import surrogate
from fairij.influence import fairness_influence, loss_influence
from fairij.model import ParamVector, mean_grad, mean_loss, per_instance_grads
from fairij.oracle import (
    compare_ihvp,
    finite_diff_check,
    fit_weighted_risk,
    loo_retrain_influence,
    median_absolute_difference,
    retrain_without,
    woodfisher_inverse,
)
from tests.conftest import biased_mixture, random_model

DP = FairnessMetricKind.DP
LOGISTIC = MlpArchitecture(input_dim=3, hidden_widths=[])


def test_finite_diff_check_on_linear_function():
    a = np.array([0.5, -2.0, 3.0])
    error = finite_diff_check(lambda p: float(a @ p.values), ParamVector(a), ParamVector([1.0, 2.0, -1.0]))
    assert error <= 1e-9


def test_finite_diff_check_flags_wrong_gradient():
    a = np.array([0.5, -2.0])
    assert finite_diff_check(lambda p: float(a @ p.values), ParamVector([0.5, 2.0]), ParamVector.zeros(2)) > 1.0


def test_finite_diff_check_limits():
    with pytest.raises(InputError):
        finite_diff_check(lambda p: 0.0, ParamVector.zeros(2), ParamVector.zeros(3))
    with pytest.raises(CapacityError):
        finite_diff_check(lambda p: 0.0, ParamVector.zeros(6000), ParamVector.zeros(6000))


def test_woodfisher_inverse_single_gradient():
    np.testing.assert_array_equal(woodfisher_inverse([[1.0, 2.0]], 0.5, 10), np.eye(2) * 2.0)


def test_weighted_fit_is_deterministic_and_stationary():
    train = biased_mixture(80, seed=0)
    first = fit_weighted_risk(train, LOGISTIC, seed=1, l2=1e-3)
    second = fit_weighted_risk(train, LOGISTIC, seed=1, l2=1e-3)
    np.testing.assert_array_equal(first.params.values, second.params.values)
    stationarity = mean_grad(first, train).values + 1e-3 * first.params.values
    assert np.linalg.norm(stationarity) <= 1e-7


def test_weight_zero_equals_dropping():
    train = biased_mixture(60, seed=2)
    dropped = retrain_without(train, LOGISTIC, 0, [3, 7], l2=1e-3)
    # N stays 60 under zero weights; the 58-row fit needs l2 rescaled to match
    removed = fit_weighted_risk(train.drop([3, 7]), LOGISTIC, seed=0, l2=1e-3 * 60 / 58)
    np.testing.assert_allclose(dropped.params.values, removed.params.values, rtol=1e-5, atol=1e-7)


def test_unconverged_fit_is_an_error():
    with pytest.raises(ConvergenceError, match="gradient norm"):
        fit_weighted_risk(biased_mixture(80, seed=0), LOGISTIC, seed=1, l2=1e-3, max_iter=1)


def test_failed_leave_one_out_fit_becomes_an_error_entry(monkeypatch):
    train = biased_mixture(40, seed=3)

    def failing(*args, **kwargs):
        raise ConvergenceError("stalled")

    monkeypatch.setattr("fairij.oracle.retrain_without", failing)
    (entry,) = loo_retrain_influence(train, train, LOGISTIC, TrainConfig(), DP, [2], l2=1e-3)
    assert entry.error == "stalled"
    assert entry.surrogate_delta is None


def test_weight_vector_length_is_checked():
    with pytest.raises(InputError):
        fit_weighted_risk(biased_mixture(10, seed=0), LOGISTIC, seed=0, weights=np.ones(3))


def test_loo_with_no_indices():
    data = biased_mixture(20, seed=0)
    assert loo_retrain_influence(data, data, LOGISTIC, TrainConfig(), DP, []) == []


def test_loo_capacity_limits():
    small = biased_mixture(20, seed=0)
    with pytest.raises(CapacityError):
        loo_retrain_influence(biased_mixture(1001, seed=0), small, LOGISTIC, TrainConfig(), DP, [0])
    with pytest.raises(CapacityError):
        loo_retrain_influence(biased_mixture(300, seed=0), small, LOGISTIC, TrainConfig(), DP, range(201))
    with pytest.raises(InputError):
        loo_retrain_influence(small, small, LOGISTIC, TrainConfig(), DP, [20])


def test_loo_entries_are_deterministic():
    train = biased_mixture(50, seed=3)
    val = biased_mixture(40, seed=4, name="val")
    first = loo_retrain_influence(train, val, LOGISTIC, TrainConfig(seed=2), DP, [0, 5], l2=1e-3)
    second = loo_retrain_influence(train, val, LOGISTIC, TrainConfig(seed=2), DP, [0, 5], l2=1e-3)
    assert [e.index for e in first] == [0, 5]
    assert all(e.error is None for e in first)
    assert [e.surrogate_delta for e in first] == [e.surrogate_delta for e in second]


def test_dropping_one_of_two_duplicates_moves_half_as_far():
    base = biased_mixture(200, seed=5)
    val = biased_mixture(100, seed=6, name="val")
    l2 = 1e-2
    cfg = IhvpConfig(method="exact", damping=l2, wf_scale=1.0 / len(base))
    fitted = fit_weighted_risk(base, LOGISTIC, seed=0, l2=l2)
    fair = np.abs(fairness_influence(fitted, base, val, DP, cfg).scores)
    loss = np.abs(loss_influence(fitted, base, val, cfg))
    # a low-leverage instance that still moves both functionals
    gnorm = np.linalg.norm(per_instance_grads(fitted, base.features, base.labels), axis=1)
    strength = np.minimum(fair / fair.max(), loss / loss.max())
    index = int(np.argmax(np.where(gnorm <= np.median(gnorm), strength, -1.0)))

    train = base.subset(np.concatenate([np.arange(len(base)), [index]]))
    (one,) = loo_retrain_influence(train, val, LOGISTIC, TrainConfig(seed=0), DP, [index], l2=l2)
    model = fit_weighted_risk(train, LOGISTIC, seed=0, l2=l2)
    both = retrain_without(train, LOGISTIC, 0, [index, len(base)], l2=l2)
    both_surrogate = surrogate(both, val, DP) - surrogate(model, val, DP)
    both_loss = mean_loss(both, val.features, val.labels) - mean_loss(model, val.features, val.labels)
    assert one.surrogate_delta / both_surrogate == pytest.approx(0.5, abs=0.05)
    assert one.loss_delta / both_loss == pytest.approx(0.5, abs=0.05)


def test_median_absolute_difference_counts_offsets():
    a = np.array([1.0, 2.0, 3.0])
    assert median_absolute_difference(a, a + 0.5) == 0.5
    assert median_absolute_difference(a, np.array([1.0, 2.0, 7.0])) == 0.0


def test_compare_ihvp_with_itself():
    data = biased_mixture(40, seed=7)
    model = random_model(3, [2], seed=7)
    cfg = IhvpConfig(method="exact", damping=0.01)
    result = compare_ihvp(model, data, data, DP, cfg, cfg)
    assert result.mad == 0.0
    assert result.r_squared == 1.0
    assert result.spearman == pytest.approx(1.0)
    assert result.reference == "exact"


def test_compare_ihvp_mad_is_symmetric():
    data = biased_mixture(50, seed=8)
    model = random_model(3, [], seed=8)
    exact = IhvpConfig(method="exact", damping=0.01)
    woodfisher = IhvpConfig(method="woodfisher", iterations=50)
    forward = compare_ihvp(model, data, data, None, exact, woodfisher)
    backward = compare_ihvp(model, data, data, None, woodfisher, exact)
    assert forward.reference == backward.reference == "exact"
    assert forward.mad == pytest.approx(backward.mad, rel=1e-12)
    assert forward.r_squared == pytest.approx(backward.r_squared, rel=1e-12)
    assert set(forward.to_dict()) >= {"mad", "r_squared", "spearman"}


def test_compare_ihvp_rescales_to_reference_mean():
    data = biased_mixture(50, seed=9)
    model = random_model(3, [], seed=9)
    exact = IhvpConfig(method="exact", damping=0.01)
    scaled = exact.model_copy(update={"wf_scale": 7.0})
    result = compare_ihvp(model, data, data, DP, scaled, exact)
    assert result.reference == "exact"
    assert result.scale_b == pytest.approx(7.0)
    assert result.mad == pytest.approx(0.0, abs=1e-12)


@pytest.mark.slow
def test_exact_influence_ranks_like_leave_one_out():
    train = biased_mixture(200, seed=10)
    val = biased_mixture(150, seed=11, name="val")
    l2 = 1e-3
    model = fit_weighted_risk(train, LOGISTIC, seed=0, l2=l2)
    cfg = IhvpConfig(method="exact", damping=l2, wf_scale=1.0 / len(train))
    report = fairness_influence(model, train, val, DP, cfg)
    entries = loo_retrain_influence(train, val, LOGISTIC, TrainConfig(seed=0), DP, range(len(train)), l2=l2)
    actual = np.array([e.surrogate_delta for e in entries])
    # removing n shifts M by about -I_n
    assert spearmanr(-report.scores, actual).statistic >= 0.9
