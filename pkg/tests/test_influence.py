import logging

import numpy as np
import pytest

from fairij.config import FairnessMetricKind, IhvpConfig, MlpArchitecture, TrainConfig
from fairij.errors import InputError
from fairij.influence import (
    InfluenceReport,
    fairness_influence,
    fairness_influence_per_instance,
    loss_influence,
    loss_influence_report,
    top_positive,
    top_positive_clipped,
)
from fairij.model import ParamVector
from fairij.oracle import fit_weighted_risk, loo_retrain_influence
from tests.conftest import biased_mixture, logistic, make_dataset, random_model

DP, EO = FairnessMetricKind.DP, FairnessMetricKind.EO
EXACT = IhvpConfig(method="exact", damping=0.01)


def report_of(scores):
    scores = np.asarray(scores, dtype=np.float64)
    return InfluenceReport(
        metric=DP, scores=scores, ihvp_vector=ParamVector.zeros(1), config=EXACT, validation="toy"
    )


def test_top_positive_orders_and_breaks_ties_by_index():
    assert top_positive(report_of([3.0, -1.0, 2.0, 3.0]), 2) == [0, 3]
    assert top_positive(report_of([3.0, -1.0, 2.0, 3.0]), 3) == [0, 3, 2]


def test_top_positive_with_no_positive_scores():
    assert top_positive(report_of([-1.0, 0.0, -0.5]), 2) == []


def test_top_positive_clips_k(caplog):
    report = report_of([0.5, -1.0, 2.0])
    assert top_positive(report, 2) == [2, 0]
    with caplog.at_level(logging.WARNING, logger="fairij.influence"):
        assert top_positive(report, 10) == [2, 0]
    assert "clipping" in caplog.text
    assert top_positive_clipped(report, 10) == ([2, 0], True)
    assert top_positive_clipped(report, 2) == ([2, 0], False)
    with pytest.raises(InputError):
        top_positive(report, -1)


def test_constant_model_has_zero_scores():
    data = biased_mixture(40, seed=0)
    model = logistic([0.0, 0.0, 0.0], 0.4)
    report = fairness_influence(model, data, data, DP, EXACT)
    np.testing.assert_array_equal(report.scores, 0.0)
    assert report.num_positive == 0


def test_duplicated_instances_share_a_score():
    data = biased_mixture(30, seed=1)
    rows = np.concatenate([np.arange(len(data)), [5]])
    doubled = data.subset(rows)
    model = random_model(3, [3], seed=1)
    report = fairness_influence(model, doubled, data, EO, EXACT)
    assert report.scores[5] == pytest.approx(report.scores[-1], rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("kind", [DP, EO, FairnessMetricKind.EQOPP])
def test_one_pass_scores_match_per_instance_scores(kind):
    data = biased_mixture(40, seed=2)
    val = biased_mixture(30, seed=12, name="val")
    model = random_model(3, [2], seed=2)
    fast = fairness_influence(model, data, val, kind, EXACT).scores
    slow = fairness_influence_per_instance(model, data, val, kind, EXACT)
    np.testing.assert_allclose(fast, slow, rtol=1e-8, atol=1e-12)


def test_scores_scale_with_wf_scale():
    data = biased_mixture(50, seed=3)
    model = random_model(3, [], seed=3)
    unit = fairness_influence(model, data, data, DP, EXACT)
    scaled = fairness_influence(model, data, data, DP, EXACT.model_copy(update={"wf_scale": 3.0}))
    np.testing.assert_allclose(scaled.scores, 3.0 * unit.scores, rtol=1e-10, atol=1e-15)
    np.testing.assert_allclose(unit.rescaled(3.0).scores, scaled.scores, rtol=1e-10, atol=1e-15)
    assert unit.rescaled(3.0).config.wf_scale == 3.0


def test_missing_validation_set_falls_back_to_train(caplog):
    data = biased_mixture(30, seed=4)
    model = random_model(3, [2], seed=4)
    with caplog.at_level(logging.WARNING, logger="fairij.influence"):
        report = fairness_influence(model, data, None, DP, EXACT)
    assert report.validation_is_train
    assert "No validation set" in caplog.text
    np.testing.assert_array_equal(report.scores, fairness_influence(model, data, data, DP, EXACT).scores)


def test_zero_validation_gradient_gives_zero_loss_scores():
    # the logistic model fits val exactly at its optimum when val is one balanced pair at x=0
    model = logistic([0.0, 0.0, 0.0], 0.0)
    val = make_dataset(np.zeros((2, 3)), [0, 1], [0, 1], name="val")
    train = biased_mixture(20, seed=5)
    np.testing.assert_array_equal(loss_influence(model, train, val, EXACT), 0.0)


def test_loss_report_and_frame():
    data = biased_mixture(25, seed=6)
    model = random_model(3, [2], seed=6)
    report = loss_influence_report(model, data, data, EXACT)
    assert report.metric is None
    fair = fairness_influence(model, data, data, DP, EXACT).with_loss_scores(report.scores)
    frame = fair.to_frame(data)
    assert list(frame.columns) == ["index", "score", "loss_score", "label", "sensitive"]
    assert len(frame) == len(data)
    ranked = [row["score"] for row in fair.sorted_scores()]
    assert ranked == sorted(ranked, reverse=True)
    payload = fair.to_dict()
    assert payload["metric"] == "dp"
    assert payload["num_positive"] == fair.num_positive


def test_woodfisher_scores_are_deterministic():
    data = biased_mixture(60, seed=7)
    model = random_model(3, [3], seed=7)
    cfg = IhvpConfig(method="woodfisher", iterations=60, instance_order_seed=2)
    first = fairness_influence(model, data, data, DP, cfg).scores
    second = fairness_influence(model, data, data, DP, cfg).scores
    np.testing.assert_array_equal(first, second)


def test_positive_scores_predict_that_dropping_lowers_the_surrogate():
    train = biased_mixture(60, seed=14)
    val = biased_mixture(120, seed=15, name="val")
    arch = MlpArchitecture(input_dim=3, hidden_widths=[])
    l2 = 1e-2
    model = fit_weighted_risk(train, arch, seed=0, l2=l2)
    cfg = IhvpConfig(method="exact", damping=l2, wf_scale=1.0 / len(train))
    report = fairness_influence(model, train, val, DP, cfg)
    entries = loo_retrain_influence(train, val, arch, TrainConfig(seed=0), DP, range(len(train)), l2=l2)
    actual = np.array([e.surrogate_delta for e in entries])
    agree = np.mean(np.sign(report.scores) == np.sign(-actual))
    assert agree >= 0.9


def test_mislabeled_outlier_has_the_largest_loss_influence():
    base = biased_mixture(49, seed=12)
    features = np.vstack([base.features, [[3.0, 0.0, 0.0]]])
    # far on the positive side but labelled negative
    train = make_dataset(features, np.append(base.labels, 0), np.append(base.sensitive, 1))
    val = biased_mixture(200, seed=13, name="val")
    arch = MlpArchitecture(input_dim=3, hidden_widths=[])
    l2 = 1e-2
    model = fit_weighted_risk(train, arch, seed=0, l2=l2)
    cfg = IhvpConfig(method="exact", damping=l2, wf_scale=1.0 / len(train))
    scores = loss_influence(model, train, val, cfg)
    outlier = len(train) - 1
    assert int(np.argmax(scores)) == outlier
    assert scores[outlier] > 0
    (entry,) = loo_retrain_influence(train, val, arch, TrainConfig(seed=0), DP, [outlier], l2=l2)
    assert entry.loss_delta < 0
