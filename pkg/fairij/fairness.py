"""Hard group-fairness metrics, their soft surrogates and the surrogate gradients."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from fairij.config import FairnessMetricKind
from fairij.data import TabularDataset
from fairij.errors import EvaluationError
from fairij.model import MlpModel, ParamVector, accuracy, output_grad_sum, predict_proba

logger = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-12


class _Term(NamedTuple):
    label: str
    privileged: np.ndarray
    unprivileged: np.ndarray


def _terms(data: TabularDataset, kind: FairnessMetricKind) -> List[_Term]:
    """Group masks compared by ``kind``, one pair per absolute-value term."""
    kind = FairnessMetricKind(kind)
    s = data.sensitive
    if kind == FairnessMetricKind.DP:
        pairs = [("all", s == 1, s == 0)]
    else:
        ys = (1,) if kind == FairnessMetricKind.EQOPP else (0, 1)
        y = data.labels
        pairs = [(f"y={v}", (s == 1) & (y == v), (s == 0) & (y == v)) for v in ys]
    terms = []
    for label, privileged, unprivileged in pairs:
        for group, mask in ((1, privileged), (0, unprivileged)):
            if not mask.any():
                cell = f"s={group}" if label == "all" else f"s={group},{label}"
                raise EvaluationError(f"{data.name}: {kind.value} needs cell {cell}, which is empty")
        terms.append(_Term(label, privileged, unprivileged))
    return terms


def _gap(values: np.ndarray, data: TabularDataset, kind: FairnessMetricKind) -> float:
    return float(sum(
        abs(values[t.privileged].mean() - values[t.unprivileged].mean()) for t in _terms(data, kind)
    ))


def hard_metric(
    model: MlpModel, data: TabularDataset, kind: FairnessMetricKind, threshold: float = 0.5
) -> float:
    """ΔDP / ΔEO / ΔEQOPP of the thresholded classifier."""
    predictions = (predict_proba(model, data.features) >= threshold).astype(np.float64)
    return _gap(predictions, data, kind)


def surrogate(model: MlpModel, data: TabularDataset, kind: FairnessMetricKind) -> float:
    """Same gap with predicted probabilities in place of hard predictions."""
    return _gap(predict_proba(model, data.features), data, kind)


class SurrogateGradient(NamedTuple):
    grad: ParamVector
    degenerate: bool
    differences: Dict[str, float]


def surrogate_grad_info(model: MlpModel, data: TabularDataset, kind: FairnessMetricKind) -> SurrogateGradient:
    """Gradient of ``surrogate`` plus the per-term signed gaps.

    A term whose gap is below 1e-12 in magnitude sits on the kink of the
    absolute value; it contributes 0 and marks the result degenerate.
    """
    proba = predict_proba(model, data.features)
    weights = np.zeros(len(data))
    degenerate = False
    differences = {}
    for term in _terms(data, kind):
        gap = float(proba[term.privileged].mean() - proba[term.unprivileged].mean())
        differences[term.label] = gap
        if abs(gap) < DEGENERATE_TOL:
            degenerate = True
            continue
        sign = np.sign(gap)
        weights += sign * term.privileged / term.privileged.sum()
        weights -= sign * term.unprivileged / term.unprivileged.sum()
    if degenerate:
        logger.warning(f"{data.name}: {FairnessMetricKind(kind).value} surrogate gap is zero for some term")
    if not weights.any():
        return SurrogateGradient(ParamVector.zeros(model.num_params), degenerate, differences)
    return SurrogateGradient(ParamVector(output_grad_sum(model, data.features, weights)), degenerate, differences)


def surrogate_grad(model: MlpModel, data: TabularDataset, kind: FairnessMetricKind) -> ParamVector:
    return surrogate_grad_info(model, data, kind).grad


@dataclass
class GroupStats:
    """Empirical conditionals: per (s, y) cell and per s group.

    Attributes:
        cells (Dict[Tuple[int, int], Tuple[int, float]]): (count, mean probability) per (s, y)
        groups (Dict[int, Tuple[int, float]]): (count, mean hard prediction) per s
    """

    cells: Dict[Tuple[int, int], Tuple[int, float]] = field(default_factory=dict)
    groups: Dict[int, Tuple[int, float]] = field(default_factory=dict)

    def to_dict(self):
        return {
            "cells": [
                {"s": s, "y": y, "count": count, "mean_proba": mean}
                for (s, y), (count, mean) in sorted(self.cells.items())
            ],
            "groups": [
                {"s": s, "count": count, "positive_rate": rate}
                for s, (count, rate) in sorted(self.groups.items())
            ],
        }


def group_stats(model: MlpModel, data: TabularDataset, threshold: float = 0.5) -> GroupStats:
    proba = predict_proba(model, data.features)
    predictions = (proba >= threshold).astype(np.float64)
    stats = GroupStats()
    for s in (0, 1):
        in_group = data.sensitive == s
        count = int(in_group.sum())
        stats.groups[s] = (count, float(predictions[in_group].mean()) if count else float("nan"))
        for y in (0, 1):
            cell = in_group & (data.labels == y)
            n_cell = int(cell.sum())
            stats.cells[(s, y)] = (n_cell, float(proba[cell].mean()) if n_cell else float("nan"))
    return stats


@dataclass
class MetricReport:
    kind: FairnessMetricKind
    hard: float
    surrogate: float
    accuracy: float
    degenerate: bool
    group_cells: GroupStats
    dataset: str

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "hard": self.hard,
            "surrogate": self.surrogate,
            "accuracy": self.accuracy,
            "degenerate": self.degenerate,
            "group_cells": self.group_cells.to_dict(),
            "dataset": self.dataset,
        }


def metric_report(
    model: MlpModel, data: TabularDataset, kind: FairnessMetricKind, threshold: float = 0.5
) -> MetricReport:
    kind = FairnessMetricKind(kind)
    proba = predict_proba(model, data.features)
    degenerate = any(
        abs(proba[t.privileged].mean() - proba[t.unprivileged].mean()) < DEGENERATE_TOL
        for t in _terms(data, kind)
    )
    return MetricReport(
        kind=kind,
        hard=hard_metric(model, data, kind, threshold),
        surrogate=surrogate(model, data, kind),
        accuracy=accuracy(model, data.features, data.labels, threshold),
        degenerate=degenerate,
        group_cells=group_stats(model, data, threshold),
        dataset=data.name,
    )
