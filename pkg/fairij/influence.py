"""Per-training-instance influence on a fairness surrogate or on validation loss.

Scores follow I_n = -grad(M)^T H^{-1} g_n. Because H^{-1} is symmetric the
IHVP is solved once for r = H^{-1} grad(M) and every score is a dot product
-g_n^T r.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from fairij.config import FairnessMetricKind, IhvpConfig
from fairij.data import TabularDataset
from fairij.errors import InputError
from fairij.fairness import surrogate_grad_info
from fairij.ihvp import ihvp, ihvp_many
from fairij.model import MlpModel, ParamVector, mean_grad, per_instance_grads
from fairij.utils import sorted_influence_rows

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1024


@dataclass(frozen=True, eq=False)
class InfluenceReport:
    """Influence scores of every training instance on one functional.

    Attributes:
        metric (Optional[FairnessMetricKind]): Targeted surrogate; None for validation loss
        scores (np.ndarray): I_n per training instance, in training-set order
        loss_scores (Optional[np.ndarray]): Loss influence per instance, when computed
        ihvp_vector (ParamVector): The cached r = H^{-1} grad(M)
        config (IhvpConfig): Engine settings the scores were computed with
        validation (str): Name of the dataset M was evaluated on
        degenerate (bool): The surrogate sat on the kink of its absolute value
        validation_is_train (bool): No validation set was given
    """

    metric: Optional[FairnessMetricKind]
    scores: np.ndarray
    ihvp_vector: ParamVector
    config: IhvpConfig
    validation: str
    loss_scores: Optional[np.ndarray] = None
    degenerate: bool = False
    validation_is_train: bool = False

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.scores > 0))

    def rescaled(self, factor: float) -> "InfluenceReport":
        """The report an engine with wf_scale multiplied by ``factor`` would produce."""
        return replace(
            self,
            scores=self.scores * factor,
            loss_scores=None if self.loss_scores is None else self.loss_scores * factor,
            ihvp_vector=self.ihvp_vector * factor,
            config=self.config.model_copy(update={"wf_scale": self.config.wf_scale * factor}),
        )

    def with_loss_scores(self, loss_scores: np.ndarray) -> "InfluenceReport":
        return replace(self, loss_scores=np.asarray(loss_scores, dtype=np.float64))

    def sorted_scores(self) -> List[dict]:
        return sorted_influence_rows(self.scores)

    def to_frame(self, train: TabularDataset) -> pd.DataFrame:
        frame = pd.DataFrame({"index": np.arange(len(self)), "score": self.scores})
        if self.loss_scores is not None:
            frame["loss_score"] = self.loss_scores
        frame["label"] = train.labels
        frame["sensitive"] = train.sensitive
        return frame

    def to_dict(self):
        return {
            "metric": None if self.metric is None else self.metric.value,
            "num_instances": len(self),
            "num_positive": self.num_positive,
            "ihvp_vector": self.ihvp_vector.values,
            "config": self.config,
            "validation": self.validation,
            "degenerate": self.degenerate,
            "validation_is_train": self.validation_is_train,
        }


def gradient_dots(model: MlpModel, train: TabularDataset, r: np.ndarray) -> np.ndarray:
    """g_n^T r for every training instance, chunked over rows."""
    out = np.empty(len(train))
    for start in range(0, len(train), CHUNK_SIZE):
        rows = slice(start, start + CHUNK_SIZE)
        out[rows] = per_instance_grads(model, train.features[rows], train.labels[rows]) @ r
    return out


def _scores_for(model: MlpModel, train: TabularDataset, u: ParamVector, cfg: IhvpConfig):
    if not np.any(u.values):
        return np.zeros(len(train)), ParamVector.zeros(model.num_params)
    r = ihvp(model, train, u, cfg)
    return -gradient_dots(model, train, r.values), r


def _validation(train: TabularDataset, val: Optional[TabularDataset]):
    if val is None:
        logger.warning("No validation set given; estimating the functional on the training data")
        return train, True
    return val, False


def fairness_influence(
    model: MlpModel,
    train: TabularDataset,
    val: Optional[TabularDataset],
    kind: FairnessMetricKind,
    cfg: IhvpConfig,
) -> InfluenceReport:
    """Influence of each training instance on the validation fairness surrogate."""
    kind = FairnessMetricKind(kind)
    target, is_train = _validation(train, val)
    info = surrogate_grad_info(model, target, kind)
    scores, r = _scores_for(model, train, info.grad, cfg)
    logger.info(
        f"{kind.value} influence on {target.name}: {int(np.sum(scores > 0))} of {len(train)} instances positive"
    )
    return InfluenceReport(
        metric=kind,
        scores=scores,
        ihvp_vector=r,
        config=cfg,
        validation=target.name,
        degenerate=info.degenerate,
        validation_is_train=is_train,
    )


def loss_influence(
    model: MlpModel, train: TabularDataset, val: Optional[TabularDataset], cfg: IhvpConfig
) -> np.ndarray:
    """Influence of each training instance on the mean validation loss."""
    return loss_influence_report(model, train, val, cfg).scores


def loss_influence_report(
    model: MlpModel, train: TabularDataset, val: Optional[TabularDataset], cfg: IhvpConfig
) -> InfluenceReport:
    target, is_train = _validation(train, val)
    scores, r = _scores_for(model, train, mean_grad(model, target), cfg)
    return InfluenceReport(
        metric=None,
        scores=scores,
        ihvp_vector=r,
        config=cfg,
        validation=target.name,
        validation_is_train=is_train,
    )


def fairness_influence_per_instance(
    model: MlpModel,
    train: TabularDataset,
    val: Optional[TabularDataset],
    kind: FairnessMetricKind,
    cfg: IhvpConfig,
) -> np.ndarray:
    """Slow path: one IHVP per training gradient, then dot with grad(M)."""
    target, _ = _validation(train, val)
    u = surrogate_grad_info(model, target, kind).grad.values
    gradients = per_instance_grads(model, train.features, train.labels)
    return -(ihvp_many(model, train, gradients, cfg) @ u)


def top_positive_clipped(report: InfluenceReport, k: int) -> Tuple[List[int], bool]:
    """Like top_positive, also returning whether k had to be clipped to the positive count."""
    if k < 0:
        raise InputError(f"k must be non-negative, got {k}")
    positive = report.num_positive
    clipped = k > positive
    if clipped:
        logger.warning(f"requested top {k} but only {positive} scores are positive; clipping")
        k = positive
    order = np.lexsort((np.arange(len(report)), -report.scores))
    return [int(i) for i in order[:k]], clipped


def top_positive(report: InfluenceReport, k: int) -> List[int]:
    """Indices of the k largest strictly positive scores; ties by ascending index."""
    return top_positive_clipped(report, k)[0]
