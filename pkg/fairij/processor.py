import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from fairij.config import DataSchema, IhvpConfig, MlpArchitecture, RunConfig, TrainConfig
from fairij.data import LoadReport, TabularDataset, holdout, load_csv, split, standardize, two_moons
from fairij.errors import InputError
from fairij.mitigate import MitigationResult, fair_ij
from fairij.model import MlpModel
from fairij.oracle import compare_ihvp
from fairij.train import ErmTrainer

logger = logging.getLogger(__name__)

# Columns written by gen-moons (TabularDataset.to_frame).
MOONS_SCHEMA = DataSchema(
    label_column="y",
    sensitive_column="s",
    positive_label_value="1",
    privileged_value="1",
)


@dataclass
class PreparedData:
    train: TabularDataset
    val: TabularDataset
    test: TabularDataset
    seed: int
    load_report: Optional[LoadReport] = None

    def splits(self) -> Dict[str, TabularDataset]:
        return {"train": self.train, "val": self.val, "test": self.test}


class ExperimentProcessor:
    """Runs the data -> ERM -> Fair-IJ pipeline for one resolved RunConfig.

    Trial ``t`` uses seed ``base_seed + t`` for the split, the validation
    cut, initialization and shuffling, so a trial can be reproduced alone.
    """

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.base_seed = cfg.resolved_seed()

    def trial_seed(self, trial: int) -> int:
        return self.base_seed + trial

    def prepare_data(self, seed: int) -> PreparedData:
        """Load, split and standardize according to the [data] section."""
        data_cfg = self.cfg.require_data()
        schema = data_cfg.schema_only()
        full = load_csv(data_cfg.path, schema, name=Path(data_cfg.path).stem)
        if data_cfg.test_path:
            test_schema = schema.model_copy(update={"skip_rows": data_cfg.test_skip_rows})
            test = load_csv(
                data_cfg.test_path, test_schema, categories=full.load_report.one_hot_map, name="test"
            )
            train, val = holdout(full, data_cfg.val_fraction, seed)
        else:
            train, val, test = split(full, data_cfg.fractions, seed)
        train, (val, test) = standardize(train, [val, test])
        logger.info(f"Prepared splits with seed {seed}: train {len(train)}, val {len(val)}, test {len(test)}")
        return PreparedData(train=train, val=val, test=test, seed=seed, load_report=full.load_report)

    def train_config(self, seed: int) -> TrainConfig:
        return self.cfg.train.model_copy(update={"seed": seed})

    def architecture(self, data: PreparedData) -> MlpArchitecture:
        return self.cfg.model.architecture(data.train.num_features)

    def train_model(self, data: PreparedData) -> MlpModel:
        trainer = ErmTrainer(self.architecture(data), self.train_config(data.seed))
        return trainer.fit(data.train, data.val)

    def mitigate(self, model: MlpModel, data: PreparedData) -> MitigationResult:
        return fair_ij(model, data.train, data.val, self.cfg.mitigation_config(), test=data.test)

    def run_trial(self, trial: int) -> Dict:
        """One sweep row: fairness and accuracy on test before and after the edit."""
        seed = self.trial_seed(trial)
        data = self.prepare_data(seed)
        model = self.train_model(data)
        result = self.mitigate(model, data)
        before, after = result.before["test"], result.after["test"]
        return {
            "trial": trial,
            "seed": seed,
            "metric": result.metric.value,
            "accuracy_before": before.accuracy,
            "accuracy_after": after.accuracy,
            "hard_before": before.hard,
            "hard_after": after.hard,
            "surrogate_before": before.surrogate,
            "surrogate_after": after.surrogate,
            "val_hard_before": result.before["val"].hard,
            "val_hard_after": result.after["val"].hard,
            "chosen_k": result.chosen_k,
            "chosen_scale": result.chosen_scale,
            "num_dminus": result.num_dminus,
        }

    def sweep(self) -> Tuple[pd.DataFrame, Dict]:
        trials = range(self.cfg.trials)
        if self.cfg.jobs > 1:
            rows = Parallel(n_jobs=self.cfg.jobs)(delayed(self.run_trial)(t) for t in trials)
        else:
            rows = [self.run_trial(t) for t in tqdm(trials, desc="sweep", disable=None)]
        frame = pd.DataFrame(rows)
        numeric = frame.drop(columns=["trial", "seed", "metric"])
        summary = {
            "trials": self.cfg.trials,
            "base_seed": self.base_seed,
            "means": numeric.mean().to_dict(),
            "stds": numeric.std(ddof=0).to_dict(),
            "config": self.cfg.model_copy(update={"seed": self.base_seed}),
        }
        return frame, summary


def load_moons(path: str) -> TabularDataset:
    return load_csv(path, MOONS_SCHEMA, name="moons")


def _study_run(cfg: RunConfig, points: Optional[TabularDataset], depth: int, run: int, seed: int) -> List[Dict]:
    study = cfg.study
    if points is None:
        points = two_moons(study.n, study.noise, study.separation, seed)
    train, test = holdout(points, study.test_fraction, seed)
    train, (test,) = standardize(train, [test])
    arch = MlpArchitecture(
        input_dim=train.num_features, hidden_widths=[study.width] * depth, activation=study.activation
    )
    train_cfg = TrainConfig(
        epochs=study.epochs,
        batch_size=study.batch_size,
        learning_rate=study.learning_rate,
        seed=seed,
        checkpoint_selection="last",
    )
    model = ErmTrainer(arch, train_cfg).fit(train, test)
    target = test.subset([0], name="test-point")
    exact = IhvpConfig(method="exact", damping=study.exact_damping, exact_max_params=cfg.ihvp.exact_max_params)
    approximations = {
        "woodfisher": IhvpConfig(
            method="woodfisher",
            iterations=min(study.iterations, len(train)),
            damping=study.woodfisher_damping,
            instance_order_seed=seed,
        ),
        "neumann": IhvpConfig(method="neumann", iterations=study.iterations, neumann_scale=study.neumann_scale),
    }
    rows = []
    for method, approx_cfg in approximations.items():
        comparison = compare_ihvp(model, train, target, None, exact, approx_cfg)
        logger.info(
            f"depth {depth} run {run} {method}: R2 {comparison.r_squared:.4f}, MAD {comparison.mad:.3e}"
        )
        rows.append({
            "frame": pd.DataFrame({
                "exact_score": comparison.scores_a,
                "approx_score": comparison.scores_b,
                "method": method,
                "depth": depth,
                "run": run,
            }),
            "summary": {
                "method": method,
                "depth": depth,
                "run": run,
                "seed": seed,
                "mad": comparison.mad,
                "r_squared": comparison.r_squared,
                "spearman": comparison.spearman,
            },
        })
    return rows


def ihvp_study(
    cfg: RunConfig, points: Optional[TabularDataset] = None, jobs: int = 1
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Exact vs WoodFisher / Neumann influence on one test point's loss, per depth and run.

    Returns the per-instance comparison rows and the per-run MAD / R² rows.
    When ``points`` is given it replaces the generated two-moons set.
    """
    study = cfg.study
    base_seed = cfg.resolved_seed()
    if not study.depths or any(d < 1 for d in study.depths):
        raise InputError(f"study depths must be positive, got {study.depths}")
    tasks = [(depth, run, base_seed + run) for depth in study.depths for run in range(study.runs)]
    if jobs > 1:
        results = Parallel(n_jobs=jobs)(delayed(_study_run)(cfg, points, *task) for task in tasks)
    else:
        results = [_study_run(cfg, points, *task) for task in tqdm(tasks, desc="ihvp-bench", disable=None)]
    entries = [entry for result in results for entry in result]
    comparisons = pd.concat([entry["frame"] for entry in entries], ignore_index=True)
    runs = pd.DataFrame([entry["summary"] for entry in entries])
    return comparisons, runs


def study_summary(runs: pd.DataFrame) -> List[Dict]:
    grouped = runs.groupby(["method", "depth"], sort=True)[["mad", "r_squared", "spearman"]].mean()
    return [
        {"method": method, "depth": int(depth), **{k: float(v) for k, v in values.items()}}
        for (method, depth), values in grouped.iterrows()
    ]

