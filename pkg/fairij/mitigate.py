"""Fair-IJ: edit trained parameters as if the most disparity-increasing instances were dropped."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fairij.config import FairnessMetricKind, IhvpConfig, MitigationConfig
from fairij.data import TabularDataset
from fairij.errors import InputError
from fairij.fairness import hard_metric, surrogate
from fairij.ihvp import ihvp, ihvp_many
from fairij.influence import InfluenceReport, fairness_influence, loss_influence
from fairij.model import MlpModel, ParamVector, accuracy, loss_grad_sum

logger = logging.getLogger(__name__)


def select_dminus(
    report: InfluenceReport,
    selection: str = "fairness_only",
    loss_scores: Optional[np.ndarray] = None,
) -> List[int]:
    """Training indices whose removal lowers the surrogate to first order, ascending."""
    positive = report.scores > 0
    if selection == "loss_aware":
        if loss_scores is None:
            loss_scores = report.loss_scores
        if loss_scores is None:
            raise InputError("loss_aware selection needs loss influence scores")
        loss_scores = np.asarray(loss_scores)
        if loss_scores.shape != report.scores.shape:
            raise InputError(f"{loss_scores.shape[0]} loss scores for {len(report)} instances")
        positive = positive & (loss_scores > 0)
    elif selection != "fairness_only":
        raise InputError(f"unknown selection rule {selection!r}")
    return [int(i) for i in np.flatnonzero(positive)]


def _check_indices(dropped: Sequence[int], n: int) -> np.ndarray:
    rows = np.asarray(list(dropped), dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise InputError(f"dropped indices must lie in [0, {n}), got range [{rows.min()}, {rows.max()}]")
    return rows


def edit_params(
    model: MlpModel, train: TabularDataset, dropped: Sequence[int], cfg: IhvpConfig
) -> ParamVector:
    """θ̂ + H^{-1} Σ_{m in dropped} g_m through a single IHVP on the summed gradient."""
    rows = _check_indices(dropped, len(train))
    if rows.size == 0:
        return model.params
    g_sum = ParamVector(loss_grad_sum(model, train.features[rows], train.labels[rows]))
    return model.params + ihvp(model, train, g_sum, cfg)


def linearized_delta(report: InfluenceReport, w_mask: np.ndarray) -> float:
    """First-order change of the surrogate under instance weights ``w_mask``."""
    w_mask = np.asarray(w_mask, dtype=np.float64)
    if w_mask.shape != report.scores.shape:
        raise InputError(f"mask has length {w_mask.shape[0]}, report has {len(report)} instances")
    return float(np.sum(report.scores * (w_mask - 1.0)))


def drop_mask(n: int, dropped: Sequence[int]) -> np.ndarray:
    mask = np.ones(n)
    mask[_check_indices(dropped, n)] = 0.0
    return mask


@dataclass
class ModelEvaluation:
    hard: float
    surrogate: float
    accuracy: float


def evaluate_model(
    model: MlpModel, data: TabularDataset, kind: FairnessMetricKind, threshold: float = 0.5
) -> ModelEvaluation:
    return ModelEvaluation(
        hard=hard_metric(model, data, kind, threshold),
        surrogate=surrogate(model, data, kind),
        accuracy=accuracy(model, data.features, data.labels, threshold),
    )


@dataclass
class Candidate:
    scale: float
    k: int
    val_hard: float
    val_surrogate: float
    admissible: bool


@dataclass
class MitigationResult:
    """Outcome of a Fair-IJ search.

    ``before`` and ``after`` map a split name (``val``, and ``test`` when a
    test set was given) to its evaluation.
    """

    theta_fair: ParamVector
    dropped: List[int]
    chosen_k: int
    chosen_scale: float
    before: Dict[str, ModelEvaluation]
    after: Dict[str, ModelEvaluation]
    linearized_metric_delta: float
    metric: FairnessMetricKind
    num_dminus: int
    noop: bool = False
    k_clipped: bool = False
    candidates: List[Candidate] = field(default_factory=list)

    def to_dict(self):
        return {
            "theta_fair": self.theta_fair.values,
            "dropped": self.dropped,
            "chosen_k": self.chosen_k,
            "chosen_scale": self.chosen_scale,
            "before": self.before,
            "after": self.after,
            "linearized_metric_delta": self.linearized_metric_delta,
            "metric": self.metric.value,
            "num_dminus": self.num_dminus,
            "noop": self.noop,
            "k_clipped": self.k_clipped,
            "candidates": self.candidates,
        }


def k_candidates(cfg: MitigationConfig, num_positive: int) -> Tuple[List[int], bool]:
    """Sorted, de-duplicated k values (0 always included) and whether any was clipped."""
    if cfg.k_grid is not None:
        clipped = any(k > num_positive for k in cfg.k_grid)
        if clipped:
            logger.warning(f"k_grid values above {num_positive} positive instances are clipped")
        grid = {min(k, num_positive) for k in cfg.k_grid}
    else:
        clipped = False
        upper = min(cfg.k_max, num_positive)
        grid = {int(round(k)) for k in np.linspace(0, upper, cfg.k_points)}
    grid.add(0)
    return sorted(grid), clipped


def _ranked_dminus(report: InfluenceReport, members: List[int]) -> List[int]:
    """D₋ ordered by descending score, ties by ascending index."""
    rows = np.asarray(members, dtype=np.int64)
    if rows.size == 0:
        return []
    order = np.lexsort((rows, -report.scores[rows]))
    return [int(i) for i in rows[order]]


def _prefix_gradient_sums(
    model: MlpModel, train: TabularDataset, ranked: List[int], ks: List[int]
) -> np.ndarray:
    """Σ of the first k ranked gradients for each positive k in ``ks``."""
    total = np.zeros(model.num_params)
    sums = []
    previous = 0
    for k in ks:
        rows = np.asarray(ranked[previous:k], dtype=np.int64)
        if rows.size:
            total = total + loss_grad_sum(model, train.features[rows], train.labels[rows])
        sums.append(total.copy())
        previous = k
    return np.vstack(sums)


def _choose(candidates: List[Candidate]) -> Candidate:
    admissible = [c for c in candidates if c.admissible]
    return min(admissible, key=lambda c: (c.val_hard, c.k, c.scale))


def fair_ij(
    model: MlpModel,
    train: TabularDataset,
    val: TabularDataset,
    cfg: MitigationConfig,
    test: Optional[TabularDataset] = None,
) -> MitigationResult:
    """Score, select and edit.

    Scores are linear in the IHVP scale, so one unit-scale report serves every
    value of ``scale_grid`` and the edit for (scale, k) is θ̂ + scale · R_k with
    R_k the unit-scale IHVP of the top-k gradient sum. A candidate is admissible
    when its validation surrogate does not exceed the unedited one; k = 0 is
    always admissible, so the chosen edit never worsens validation fairness.
    """
    kind = FairnessMetricKind(cfg.metric)
    unit_cfg = cfg.ihvp.model_copy(update={"wf_scale": 1.0})
    report = fairness_influence(model, train, val, kind, unit_cfg)
    if cfg.selection == "loss_aware":
        report = report.with_loss_scores(loss_influence(model, train, val, unit_cfg))
    ranked = _ranked_dminus(report, select_dminus(report, cfg.selection))
    ks, k_clipped = k_candidates(cfg, len(ranked))
    scales = sorted(cfg.scale_grid)

    splits = {"val": val} if test is None else {"val": val, "test": test}
    before = {name: evaluate_model(model, data, kind, cfg.threshold) for name, data in splits.items()}
    baseline = before["val"]

    positive_ks = [k for k in ks if k > 0]
    directions: Dict[int, np.ndarray] = {}
    if positive_ks:
        solved = ihvp_many(model, train, _prefix_gradient_sums(model, train, ranked, positive_ks), unit_cfg)
        directions = dict(zip(positive_ks, solved))

    def params_for(scale: float, k: int) -> Optional[ParamVector]:
        if k == 0:
            return model.params
        values = model.params.values + scale * directions[k]
        return ParamVector(values) if np.all(np.isfinite(values)) else None

    cache: Dict[Tuple[float, int], Candidate] = {}

    def evaluate(scale: float, k: int) -> Candidate:
        if (scale, k) not in cache:
            params = params_for(scale, k)
            if params is None:
                cache[(scale, k)] = Candidate(scale, k, float("inf"), float("inf"), False)
            else:
                edited = evaluate_model(model.with_params(params), val, kind, cfg.threshold)
                admissible = k == 0 or edited.surrogate <= baseline.surrogate
                cache[(scale, k)] = Candidate(scale, k, edited.hard, edited.surrogate, admissible)
        return cache[(scale, k)]

    if cfg.search == "grid":
        candidates = [evaluate(scale, k) for scale in scales for k in ks]
        best = _choose(candidates)
    else:
        finalists = []
        for scale in scales:
            current = evaluate(scale, 0)
            for k in positive_ks:
                candidate = evaluate(scale, k)
                if not candidate.admissible or candidate.val_hard >= current.val_hard:
                    break
                current = candidate
            finalists.append(current)
        best = _choose(finalists)
        candidates = list(cache.values())

    dropped = ranked[:best.k]
    theta_fair = params_for(best.scale, best.k)
    edited = model.with_params(theta_fair)
    after = {name: evaluate_model(edited, data, kind, cfg.threshold) for name, data in splits.items()}
    mask = drop_mask(len(train), dropped)
    noop = best.k == 0
    if not ranked:
        logger.info("No training instance has positive influence; returning the unedited model")
    logger.info(
        f"Fair-IJ ({kind.value}): k={best.k} of {len(ranked)}, scale={best.scale}, "
        f"val hard {baseline.hard:.4f} -> {after['val'].hard:.4f}"
    )
    return MitigationResult(
        theta_fair=theta_fair,
        dropped=dropped,
        chosen_k=best.k,
        chosen_scale=best.scale,
        before=before,
        after=after,
        linearized_metric_delta=linearized_delta(report.rescaled(best.scale), mask),
        metric=kind,
        num_dminus=len(ranked),
        noop=noop,
        k_clipped=k_clipped,
        candidates=sorted(candidates, key=lambda c: (c.scale, c.k)),
    )
