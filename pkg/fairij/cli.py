import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
from pydantic import ValidationError

from fairij.config import FairnessMetricKind, RunConfig, load_run_config
from fairij.data import two_moons
from fairij.errors import ConfigError, FairIJError, exit_code_for
from fairij.fairness import metric_report
from fairij.influence import fairness_influence, loss_influence
from fairij.model import MlpModel, load_checkpoint, save_checkpoint
from fairij.processor import ExperimentProcessor, PreparedData, ihvp_study, load_moons, study_summary
from fairij.train import ErmTrainer
from fairij.utils import read_json, write_csv, write_json

logger = logging.getLogger("fairij")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
METRICS = [kind.value for kind in FairnessMetricKind]


def emit_report(result: Any, path: Path, companions: Optional[Dict[str, Any]] = None) -> List[Path]:
    """Write ``result`` as deterministic JSON plus CSV companions next to it.

    ``companions`` maps a suffix to rows; each lands in ``<stem>_<suffix>.csv``.
    """
    path = Path(path)
    written = [write_json(result, path)]
    for suffix, rows in (companions or {}).items():
        written.append(write_csv(rows, path.with_name(f"{path.stem}_{suffix}.csv")))
    return written


def _artifact(cfg: RunConfig, seed: int, **payload: Any) -> Dict[str, Any]:
    return {"config": cfg.model_copy(update={"seed": seed}), "seed": seed, **payload}


class Context:
    def __init__(self, config_path: Optional[str], overrides: Tuple[str, ...], seed: Optional[int], output_dir: Optional[str]):
        self.config_path = config_path
        self.overrides = overrides
        self.seed = seed
        self.output_dir = output_dir

    def run_config(self, **shortcuts: Any) -> RunConfig:
        return load_run_config(
            self.config_path, self.overrides, seed=self.seed, output_dir=self.output_dir, **shortcuts
        )

    def artifact_config(self, path: str) -> RunConfig:
        """The resolved config embedded in a previous run's JSON artifact."""
        payload = read_json(path)
        if not isinstance(payload, dict) or "config" not in payload:
            raise ConfigError(f"{path} does not embed a run config")
        cfg = RunConfig.model_validate(payload["config"])
        return cfg.model_copy(update={"output_dir": self.output_dir}) if self.output_dir else cfg


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output directory {path} is not writable: {e}") from e
    return path


def _model_and_data(cfg: RunConfig, checkpoint: Optional[str]) -> Tuple[MlpModel, PreparedData]:
    path = Path(checkpoint) if checkpoint else Path(cfg.output_dir) / "model.json"
    model, seed = load_checkpoint(path)
    data = ExperimentProcessor(cfg).prepare_data(seed)
    return model, data


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key=value config file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key")
@click.option("--seed", type=int, help="Global seed (falls back to FAIRIJ_SEED, then 0)")
@click.option("--output-dir", "-d", help="Directory for artifacts")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx, config_path, overrides, seed, output_dir, verbose):
    """Fairness influence scoring and post-hoc Fair-IJ mitigation for tabular classifiers."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)
    ctx.obj = Context(config_path, overrides, seed, output_dir)


@cli.command()
@click.pass_obj
def prep(obj: Context):
    """Load, split and standardize the dataset; write the splits and load report."""
    cfg = obj.run_config()
    out = _out(cfg)
    seed = cfg.resolved_seed()
    data = ExperimentProcessor(cfg).prepare_data(seed)
    for name, dataset in data.splits().items():
        write_csv(dataset.to_frame(), out / f"{name}.csv")
    write_json(_artifact(cfg, seed, load_report=data.load_report, standardization=data.train.standardization),
               out / "prep.json")
    click.echo(f"prep: train {len(data.train)}, val {len(data.val)}, test {len(data.test)} rows -> {out}")


@cli.command("gen-moons")
@click.option("--n", "n", type=int, default=10000, show_default=True)
@click.option("--noise", type=float, default=0.1, show_default=True)
@click.option("--separation", type=float, default=1.0, show_default=True)
@click.option("--output", "-o", required=True, type=click.Path(dir_okay=False))
@click.pass_obj
def gen_moons(obj: Context, n, noise, separation, output):
    """Write a two-moons dataset as CSV (x1, x2, s, y)."""
    seed = obj.seed if obj.seed is not None else obj.run_config().resolved_seed()
    dataset = two_moons(n, noise, separation, seed)
    write_csv(dataset.to_frame(), output)
    click.echo(f"gen-moons: {n} points (seed {seed}) -> {output}")


@cli.command()
@click.pass_obj
def train(obj: Context):
    """Train the ERM classifier and save the selected checkpoint."""
    cfg = obj.run_config()
    out = _out(cfg)
    processor = ExperimentProcessor(cfg)
    seed = cfg.resolved_seed()
    data = processor.prepare_data(seed)
    trainer = ErmTrainer(processor.architecture(data), processor.train_config(seed))
    model = trainer.fit(data.train, data.val)
    save_checkpoint(model, out / "model.json", seed)
    write_json(_artifact(cfg, seed, history=trainer.history), out / "train.json")
    best = trainer.history.epochs[trainer.history.selected_epoch - 1]
    click.echo(f"train: {model.num_params} params, epoch {best.epoch}, val accuracy {best.val_accuracy:.4f}")


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Defaults to <output-dir>/model.json")
@click.option("--metric", type=click.Choice(METRICS))
@click.option("--with-loss/--no-loss", default=True, show_default=True, help="Also score validation loss")
@click.pass_obj
def influence(obj: Context, checkpoint, metric, with_loss):
    """Score every training instance's influence on the validation surrogate."""
    cfg = obj.run_config(mitigation__metric=metric)
    out = _out(cfg)
    model, data = _model_and_data(cfg, checkpoint)
    report = fairness_influence(model, data.train, data.val, cfg.mitigation.metric, cfg.ihvp)
    if with_loss:
        report = report.with_loss_scores(loss_influence(model, data.train, data.val, cfg.ihvp))
    emit_report(
        _artifact(cfg, data.seed, report=report),
        out / "influence.json",
        {"scores": report.to_frame(data.train), "sorted": report.sorted_scores()},
    )
    click.echo(
        f"influence: {report.num_positive} of {len(report)} instances increase {report.metric.value} -> {out}"
    )


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Defaults to <output-dir>/model.json")
@click.option("--metric", type=click.Choice(METRICS))
@click.pass_obj
def mitigate(obj: Context, checkpoint, metric):
    """Run the Fair-IJ search and write the edited checkpoint."""
    cfg = obj.run_config(mitigation__metric=metric)
    out = _out(cfg)
    model, data = _model_and_data(cfg, checkpoint)
    result = ExperimentProcessor(cfg).mitigate(model, data)
    save_checkpoint(model.with_params(result.theta_fair), out / "model_fair.json", data.seed, created_by="fairij-mitigate")
    emit_report(
        _artifact(cfg, data.seed, result=result),
        out / "mitigation.json",
        {"candidates": [vars(c) for c in result.candidates]},
    )
    status = "no-op" if result.noop else f"dropped {len(result.dropped)}"
    click.echo(
        f"mitigate: k={result.chosen_k} scale={result.chosen_scale} ({status}); "
        f"test {result.metric.value} {result.before['test'].hard:.4f} -> {result.after['test'].hard:.4f}"
    )


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Defaults to <output-dir>/model.json")
@click.pass_obj
def evaluate(obj: Context, checkpoint):
    """Metric reports (dp, eo, eqopp) of a checkpoint on val and test."""
    cfg = obj.run_config()
    out = _out(cfg)
    model, data = _model_and_data(cfg, checkpoint)
    reports = {
        split_name: {kind.value: metric_report(model, dataset, kind) for kind in FairnessMetricKind}
        for split_name, dataset in (("val", data.val), ("test", data.test))
    }
    name = Path(checkpoint).stem if checkpoint else "model"
    write_json(_artifact(cfg, data.seed, reports=reports), out / f"eval_{name}.json")
    test = reports["test"]
    click.echo(
        f"eval: test accuracy {test['dp'].accuracy:.4f}, dp {test['dp'].hard:.4f}, eo {test['eo'].hard:.4f}"
    )


@cli.command("ihvp-bench")
@click.option("--data", "data_path", type=click.Path(dir_okay=False), help="Two-moons CSV from gen-moons")
@click.option("--runs", type=int, help="Runs per depth")
@click.option("--jobs", type=int, help="Parallel runs")
@click.pass_obj
def ihvp_bench(obj: Context, data_path, runs, jobs):
    """Compare WoodFisher and Neumann influence scores against the exact solve on two moons."""
    cfg = obj.run_config(study__runs=runs, jobs=jobs)
    out = _out(cfg)
    points = load_moons(data_path) if data_path else None
    comparisons, run_rows = ihvp_study(cfg, points, jobs=cfg.jobs)
    summary = study_summary(run_rows)
    emit_report(
        _artifact(cfg, cfg.resolved_seed(), summary=summary),
        out / "ihvp_bench.json",
        {"comparison": comparisons, "runs": run_rows},
    )
    for row in summary:
        click.echo(f"ihvp-bench: {row['method']} depth {row['depth']}: R2 {row['r_squared']:.4f}, MAD {row['mad']:.3e}")


@cli.command()
@click.option("--metric", type=click.Choice(METRICS))
@click.option("--trials", type=int)
@click.option("--jobs", type=int)
@click.option(
    "--from-artifact",
    type=click.Path(dir_okay=False),
    help="Re-run with the config embedded in a previous sweep.json; other options are ignored",
)
@click.pass_obj
def sweep(obj: Context, metric, trials, jobs, from_artifact):
    """Repeat data -> train -> Fair-IJ over seeded trials."""
    if from_artifact:
        cfg = obj.artifact_config(from_artifact)
    else:
        cfg = obj.run_config(mitigation__metric=metric, trials=trials, jobs=jobs)
    out = _out(cfg)
    frame, summary = ExperimentProcessor(cfg).sweep()
    emit_report(summary, out / "sweep.json", {"trials": frame})
    means = summary["means"]
    click.echo(
        f"sweep: {cfg.trials} trials, {cfg.mitigation.metric.value} {means['hard_before']:.4f} -> "
        f"{means['hard_after']:.4f}, accuracy {means['accuracy_before']:.4f} -> {means['accuracy_after']:.4f}"
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return the process exit code."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="fairij", standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except ValidationError as e:
        logger.error(f"invalid configuration: {e}")
        return 1
    except FairIJError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return exit_code_for(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
