from pathlib import Path

import numpy as np
import pytest

from fairij.config import RunConfig, StudyConfig, load_run_config
from fairij.data import load_csv, two_moons
from fairij.errors import InputError
from fairij.processor import ExperimentProcessor, ihvp_study, load_moons, study_summary
from tests.conftest import biased_mixture


def small_run(tmp_path, **extra):
    csv = tmp_path / "mixture.csv"
    biased_mixture(240, seed=1).to_frame().to_csv(csv, index=False)
    data = {
        "path": str(csv),
        "label_column": "y",
        "sensitive_column": "s",
        "positive_label_value": "1",
        "privileged_value": "1",
    }
    return RunConfig(
        data={**data, **extra},
        model={"hidden_widths": [2]},
        train={"epochs": 3, "batch_size": 32, "learning_rate": 0.01},
        ihvp={"method": "exact", "damping": 0.01},
        mitigation={"k_points": 4, "scale_grid": [1.0]},
        seed=5,
    )


def test_prepare_data_is_standardized_and_seeded(tmp_path):
    processor = ExperimentProcessor(small_run(tmp_path))
    data = processor.prepare_data(5)
    assert (len(data.train), len(data.val), len(data.test)) == (120, 48, 72)
    np.testing.assert_allclose(data.train.features.mean(axis=0), 0.0, atol=1e-12)
    again = processor.prepare_data(5)
    np.testing.assert_array_equal(data.test.indices, again.test.indices)


def test_prepare_data_with_separate_test_file(tmp_path):
    test_csv = tmp_path / "held.csv"
    biased_mixture(50, seed=2).to_frame().to_csv(test_csv, index=False)
    data = ExperimentProcessor(small_run(tmp_path, test_path=str(test_csv), val_fraction=0.25)).prepare_data(0)
    assert (len(data.train), len(data.val), len(data.test)) == (180, 60, 50)
    assert data.test.name == "test"


def test_sweep_rows_use_consecutive_seeds(tmp_path):
    cfg = small_run(tmp_path).model_copy(update={"trials": 2})
    frame, summary = ExperimentProcessor(cfg).sweep()
    assert frame["seed"].tolist() == [5, 6]
    assert summary["trials"] == 2
    assert set(summary["means"]) >= {"hard_before", "hard_after", "accuracy_before", "chosen_k"}


def test_ihvp_study_small(tmp_path):
    cfg = RunConfig(
        study=StudyConfig(n=80, depths=[1], runs=1, epochs=2, batch_size=16, iterations=40, width=2), seed=3
    )
    comparisons, runs = ihvp_study(cfg)
    assert set(comparisons["method"]) == {"woodfisher", "neumann"}
    assert len(comparisons) == 2 * 64
    assert len(runs) == 2
    summary = study_summary(runs)
    assert {row["method"] for row in summary} == {"woodfisher", "neumann"}
    assert all(row["depth"] == 1 for row in summary)


def test_ihvp_study_reads_generated_points(tmp_path):
    path = tmp_path / "moons.csv"
    two_moons(60, noise=0.1, separation=1.0, seed=0).to_frame().to_csv(path, index=False)
    points = load_moons(str(path))
    assert len(points) == 60
    cfg = RunConfig(study=StudyConfig(depths=[1], runs=1, epochs=1, iterations=20, width=2))
    comparisons, _ = ihvp_study(cfg, points)
    assert len(comparisons) == 2 * 48


def test_ihvp_study_rejects_bad_depths():
    with pytest.raises(InputError):
        ihvp_study(RunConfig(study=StudyConfig(depths=[0], runs=1)))


@pytest.mark.slow
def test_two_moons_engines_track_the_exact_solve():
    cfg = RunConfig(study=StudyConfig(depths=[1], runs=10), seed=0)
    _, runs = ihvp_study(cfg, jobs=4)
    summary = {row["method"]: row for row in study_summary(runs)}
    assert summary["woodfisher"]["r_squared"] >= 0.8
    assert summary["neumann"]["r_squared"] >= 0.8


ROOT = Path(__file__).resolve().parent.parent
ADULT_DATA, ADULT_TEST = ROOT / "data" / "adult.data", ROOT / "data" / "adult.test"


@pytest.mark.slow
@pytest.mark.skipif(not (ADULT_DATA.exists() and ADULT_TEST.exists()), reason="UCI Adult files not in data/")
def test_fair_ij_on_adult():
    cfg = load_run_config(
        ROOT / "configs" / "adult.conf", [f"data.path={ADULT_DATA}", f"data.test_path={ADULT_TEST}"]
    )
    full = load_csv(ADULT_DATA, cfg.require_data().schema_only())
    assert full.load_report.rows_read == 32561
    _, summary = ExperimentProcessor(cfg).sweep()
    means = summary["means"]
    assert summary["trials"] == 10
    assert means["hard_before"] >= 0.12
    assert means["hard_after"] <= 0.05
    assert means["accuracy_before"] - means["accuracy_after"] <= 0.03
