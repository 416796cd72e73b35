"""Ground truth for the approximations: exact retraining, finite differences and IHVP comparisons."""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.optimize
from joblib import Parallel, delayed
from scipy.stats import spearmanr
from sklearn.metrics import r2_score
from tqdm import tqdm

from fairij.config import FairnessMetricKind, IhvpConfig, MlpArchitecture, TrainConfig
from fairij.data import TabularDataset
from fairij.errors import CapacityError, ConvergenceError, InputError, NumericalError, TrainingDivergedError
from fairij.fairness import surrogate
from fairij.influence import fairness_influence, loss_influence
from fairij.model import MlpModel, ParamVector, init_params, loss_grad_sum, losses, mean_loss

logger = logging.getLogger(__name__)

LOO_MAX_TRAIN = 1000
LOO_MAX_INDICES = 200
FD_CHECK_MAX_PARAMS = 5000
DEFAULT_L2 = 1e-6
CONVERGED_GRAD_NORM = 1e-8


def fit_weighted_risk(
    train: TabularDataset,
    arch: MlpArchitecture,
    seed: int,
    weights: Optional[np.ndarray] = None,
    l2: float = DEFAULT_L2,
    tol: float = 1e-10,
    max_iter: int = 20000,
    grad_tol: float = CONVERGED_GRAD_NORM,
) -> MlpModel:
    """Minimize (1/N) Σ w_n ℓ_n(θ) + (l2/2)‖θ‖² deterministically.

    N is the full training-set size whatever the weights, so a zero weight
    drops an instance without renormalizing the rest. Full-batch L-BFGS from
    the seeded initialization.
    """
    n = len(train)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise InputError(f"{weights.shape[0]} weights for {n} training instances")

    def objective(values: np.ndarray):
        model = MlpModel(arch, ParamVector(values))
        value = float(weights @ losses(model, train.features, train.labels)) / n + 0.5 * l2 * float(values @ values)
        grad = loss_grad_sum(model, train.features, train.labels, weights) / n + l2 * values
        return value, grad

    result = scipy.optimize.minimize(
        objective,
        init_params(arch, seed).values,
        jac=True,
        method="L-BFGS-B",
        options={"gtol": tol, "ftol": 0.0, "maxiter": max_iter, "maxfun": 2 * max_iter},
    )
    if not np.all(np.isfinite(result.x)) or not np.isfinite(result.fun):
        raise TrainingDivergedError(f"weighted-risk fit diverged: {result.message}")
    grad_norm = float(np.linalg.norm(result.jac))
    logger.debug(f"weighted-risk fit: {result.nit} iterations, gradient norm {grad_norm:.3e}")
    if grad_norm > grad_tol:
        raise ConvergenceError(
            f"weighted-risk fit stopped at gradient norm {grad_norm:.3e} > {grad_tol:.0e} "
            f"after {result.nit} iterations: {result.message}"
        )
    return MlpModel(arch, ParamVector(result.x))


def retrain_without(
    train: TabularDataset,
    arch: MlpArchitecture,
    seed: int,
    dropped: Sequence[int],
    l2: float = DEFAULT_L2,
) -> MlpModel:
    weights = np.ones(len(train))
    weights[np.asarray(list(dropped), dtype=np.int64)] = 0.0
    return fit_weighted_risk(train, arch, seed, weights=weights, l2=l2)


@dataclass
class LooEntry:
    """Change of the validation functionals after retraining without ``index``."""

    index: int
    surrogate_delta: Optional[float]
    loss_delta: Optional[float]
    error: Optional[str] = None


def _loo_one(
    train: TabularDataset,
    val: TabularDataset,
    arch: MlpArchitecture,
    seed: int,
    kind: FairnessMetricKind,
    index: int,
    base_surrogate: float,
    base_loss: float,
    l2: float,
) -> LooEntry:
    try:
        model = retrain_without(train, arch, seed, [index], l2=l2)
    except NumericalError as e:
        logger.error(f"retrain without instance {index} failed: {e}")
        return LooEntry(index, None, None, error=str(e))
    return LooEntry(
        index=index,
        surrogate_delta=surrogate(model, val, kind) - base_surrogate,
        loss_delta=mean_loss(model, val.features, val.labels) - base_loss,
    )


def loo_retrain_influence(
    train: TabularDataset,
    val: TabularDataset,
    arch: MlpArchitecture,
    train_cfg: TrainConfig,
    kind: FairnessMetricKind,
    indices: Sequence[int],
    l2: float = DEFAULT_L2,
    n_jobs: int = 1,
) -> List[LooEntry]:
    """Exact leave-one-out deltas M_val(retrained) - M_val(original) for each index."""
    indices = [int(i) for i in indices]
    if not indices:
        return []
    if len(train) > LOO_MAX_TRAIN:
        raise CapacityError(f"LOO retraining is capped at {LOO_MAX_TRAIN} training instances, got {len(train)}")
    if len(indices) > LOO_MAX_INDICES:
        raise CapacityError(f"LOO retraining is capped at {LOO_MAX_INDICES} indices, got {len(indices)}")
    bad = [i for i in indices if not 0 <= i < len(train)]
    if bad:
        raise InputError(f"LOO indices out of range: {bad[:5]}")
    kind = FairnessMetricKind(kind)
    base = fit_weighted_risk(train, arch, train_cfg.seed, l2=l2)
    base_surrogate = surrogate(base, val, kind)
    base_loss = mean_loss(base, val.features, val.labels)
    logger.info(f"Retraining {len(indices)} leave-one-out models (N={len(train)}, jobs={n_jobs})")
    return Parallel(n_jobs=n_jobs)(
        delayed(_loo_one)(train, val, arch, train_cfg.seed, kind, i, base_surrogate, base_loss, l2)
        for i in tqdm(indices, desc="loo", disable=None)
    )


def finite_diff_check(
    f: Callable[[ParamVector], float], grad: ParamVector, point: ParamVector
) -> float:
    """Largest relative error between ``grad`` and central differences of ``f`` at ``point``."""
    d = len(point)
    if d > FD_CHECK_MAX_PARAMS:
        raise CapacityError(f"finite-difference check is capped at {FD_CHECK_MAX_PARAMS} parameters, got {d}")
    if len(grad) != d:
        raise InputError(f"gradient has length {len(grad)}, point has {d}")
    theta = point.values
    worst = 0.0
    for i in range(d):
        step = 1e-5 * (1.0 + abs(theta[i]))
        plus, minus = theta.copy(), theta.copy()
        plus[i] += step
        minus[i] -= step
        numeric = (f(ParamVector(plus)) - f(ParamVector(minus))) / (2.0 * step)
        analytic = grad.values[i]
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, error)
    return worst


def woodfisher_inverse(gradients: np.ndarray, damping: float, n_total: int) -> np.ndarray:
    """Explicit WoodFisher inverse: start from I/λ, then one Woodbury update per gradient after the first."""
    gradients = np.atleast_2d(np.asarray(gradients, dtype=np.float64))
    inverse = np.eye(gradients.shape[1]) / damping
    for g in gradients[1:]:
        hg = inverse @ g
        inverse = inverse - np.outer(hg, hg) / (n_total + g @ hg)
    return inverse


@dataclass
class IhvpComparison:
    """Influence scores of two IHVP engines after rescaling both to the reference mean.

    ``reference`` is the exact engine when one side uses it, else the first.
    """

    method_a: str
    method_b: str
    reference: str
    scores_a: np.ndarray
    scores_b: np.ndarray
    scale_a: float
    scale_b: float
    mad: float
    r_squared: float
    spearman: float

    def to_dict(self):
        return {
            "method_a": self.method_a,
            "method_b": self.method_b,
            "reference": self.reference,
            "scale_a": self.scale_a,
            "scale_b": self.scale_b,
            "mad": self.mad,
            "r_squared": self.r_squared,
            "spearman": self.spearman,
        }


def median_absolute_difference(a: np.ndarray, b: np.ndarray) -> float:
    """median |a - b|; not centred, so a constant offset between the arrays counts."""
    return float(np.median(np.abs(np.asarray(a) - np.asarray(b))))


def _mean_match(scores: np.ndarray, target_mean: float) -> float:
    mean = float(np.mean(scores))
    return target_mean / mean if mean != 0.0 else 1.0


def compare_ihvp(
    model: MlpModel,
    train: TabularDataset,
    val: TabularDataset,
    kind: Optional[FairnessMetricKind],
    cfg_a: IhvpConfig,
    cfg_b: IhvpConfig,
) -> IhvpComparison:
    """Score training instances under two engines and measure their agreement.

    With ``kind=None`` the functional is the mean loss on ``val``; the
    two-moons study uses a single test point as ``val``.
    """

    def scores(cfg: IhvpConfig) -> np.ndarray:
        if kind is None:
            return loss_influence(model, train, val, cfg)
        return fairness_influence(model, train, val, kind, cfg).scores

    raw_a, raw_b = scores(cfg_a), scores(cfg_b)
    b_is_reference = cfg_b.method == "exact" and cfg_a.method != "exact"
    reference = raw_b if b_is_reference else raw_a
    target_mean = float(np.mean(reference))
    scale_a, scale_b = _mean_match(raw_a, target_mean), _mean_match(raw_b, target_mean)
    a, b = raw_a * scale_a, raw_b * scale_b
    exact_side, approx_side = (b, a) if b_is_reference else (a, b)
    if np.ptp(exact_side) == 0.0:
        r_squared = 1.0 if np.array_equal(exact_side, approx_side) else 0.0
        rho = r_squared
    else:
        r_squared = float(r2_score(exact_side, approx_side))
        rho = float(spearmanr(exact_side, approx_side).statistic) if np.ptp(approx_side) > 0 else 0.0
    return IhvpComparison(
        method_a=cfg_a.method,
        method_b=cfg_b.method,
        reference=cfg_b.method if b_is_reference else cfg_a.method,
        scores_a=a,
        scores_b=b,
        scale_a=scale_a,
        scale_b=scale_b,
        mad=median_absolute_difference(a, b),
        r_squared=r_squared,
        spearman=rho,
    )
