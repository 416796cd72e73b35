import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from tqdm import tqdm

from fairij.config import MlpArchitecture, TrainConfig
from fairij.data import TabularDataset
from fairij.errors import InputError, TrainingDivergedError
from fairij.model import (
    PROBA_EPS,
    MlpModel,
    ParamVector,
    accuracy,
    bce,
    init_params,
    logits,
    loss_grad_sum,
    predict_proba,
    saturated,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
# Loss of an instance clamped on the wrong side of the sigmoid.
SATURATED_LOSS = -np.log(PROBA_EPS) - 1e-3


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainingHistory:
    """Per-epoch record of a training run and the epoch whose parameters were kept."""

    epochs: List[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0

    def to_dict(self):
        return {
            "epochs": [vars(record) for record in self.epochs],
            "selected_epoch": self.selected_epoch,
        }


class ErmTrainer:
    """Minibatch empirical-risk minimization for the MLP family.

    Initialization and per-epoch shuffling are both seeded from ``cfg.seed``,
    so two runs on the same inputs produce identical parameters. At the end
    of every epoch the model is scored on the validation set; with
    ``checkpoint_selection="best_val_accuracy"`` the earliest epoch with the
    highest hard accuracy is returned.

    Attributes:
        arch (MlpArchitecture): Architecture to train
        cfg (TrainConfig): Optimizer and schedule settings
        history (TrainingHistory): Filled in by ``fit``
    """

    def __init__(self, arch: MlpArchitecture, cfg: TrainConfig, show_progress: bool = False):
        self.arch = arch
        self.cfg = cfg
        self.show_progress = show_progress
        self.history = TrainingHistory()

    def _check_inputs(self, train: TabularDataset, val: TabularDataset) -> None:
        for dataset in (train, val):
            if dataset.num_features != self.arch.input_dim:
                raise InputError(
                    f"{dataset.name} has {dataset.num_features} features, architecture expects {self.arch.input_dim}"
                )

    def _step(self, theta: np.ndarray, grad: np.ndarray, state: dict) -> np.ndarray:
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "sgd":
            return theta - lr * grad
        state["t"] += 1
        t = state["t"]
        state["m"] = ADAM_BETA1 * state["m"] + (1.0 - ADAM_BETA1) * grad
        state["v"] = ADAM_BETA2 * state["v"] + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = state["m"] / (1.0 - ADAM_BETA1 ** t)
        v_hat = state["v"] / (1.0 - ADAM_BETA2 ** t)
        return theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    def fit(self, train: TabularDataset, val: TabularDataset) -> MlpModel:
        """Train on ``train`` and select a checkpoint on ``val``.

        Args:
            train (TabularDataset): Training set
            val (TabularDataset): Validation set used for checkpoint selection

        Returns:
            MlpModel: The selected checkpoint
        """
        self._check_inputs(train, val)
        cfg = self.cfg
        theta = init_params(self.arch, cfg.seed).values.copy()
        rng = np.random.default_rng([cfg.seed, 1])
        state = {"t": 0, "m": np.zeros_like(theta), "v": np.zeros_like(theta)}
        n = len(train)
        best_theta: Optional[np.ndarray] = None
        best_accuracy = -1.0
        self.history = TrainingHistory()

        epochs = tqdm(range(1, cfg.epochs + 1), desc="train", disable=not self.show_progress)
        for epoch in epochs:
            order = rng.permutation(n)
            loss_total = 0.0
            for batch, start in enumerate(range(0, n, cfg.batch_size)):
                rows = order[start:start + cfg.batch_size]
                model = MlpModel(self.arch, ParamVector(theta))
                features, labels = train.features[rows], train.labels[rows]
                batch_logits = logits(model, features)
                if not np.all(np.isfinite(batch_logits)):
                    raise TrainingDivergedError(f"non-finite logits at epoch {epoch}, batch {batch}")
                instance_losses = bce(predict_proba(model, features), labels)
                if np.all(saturated(batch_logits)) and np.any(instance_losses >= SATURATED_LOSS):
                    raise TrainingDivergedError(
                        f"all instances saturated with misclassified ones at epoch {epoch}, batch {batch}"
                    )
                batch_loss = float(np.sum(instance_losses))
                grad = loss_grad_sum(model, features, labels) / len(rows)
                if cfg.weight_decay:
                    grad = grad + cfg.weight_decay * theta
                if not np.isfinite(batch_loss) or not np.all(np.isfinite(grad)):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batch}")
                theta = self._step(theta, grad, state)
                if not np.all(np.isfinite(theta)):
                    raise TrainingDivergedError(f"parameters diverged at epoch {epoch}, batch {batch}")
                loss_total += batch_loss

            model = MlpModel(self.arch, ParamVector(theta))
            val_accuracy = accuracy(model, val.features, val.labels)
            record = EpochRecord(epoch=epoch, train_loss=loss_total / n, val_accuracy=val_accuracy)
            self.history.epochs.append(record)
            logger.debug(f"epoch {epoch}: train loss {record.train_loss:.6f}, val accuracy {val_accuracy:.4f}")
            if val_accuracy > best_accuracy:
                best_accuracy = val_accuracy
                best_theta = theta.copy()
                self.history.selected_epoch = epoch

        if cfg.checkpoint_selection == "last" or best_theta is None:
            self.history.selected_epoch = cfg.epochs
            best_theta = theta
        logger.info(
            f"Trained {self.arch.num_params} parameters for {cfg.epochs} epochs; "
            f"kept epoch {self.history.selected_epoch}"
        )
        return MlpModel(self.arch, ParamVector(best_theta))


def train_erm(
    train: TabularDataset,
    val: TabularDataset,
    arch: MlpArchitecture,
    cfg: TrainConfig,
    show_progress: bool = False,
) -> MlpModel:
    return ErmTrainer(arch, cfg, show_progress=show_progress).fit(train, val)
