"""Inverse-Hessian-vector products: WoodFisher recurrence, Neumann series and a damped direct solve.

Every engine returns ``wf_scale * H^{-1} v`` for its own estimate of H, the
Hessian of the mean training loss at the trained parameters. The ``*_many``
entry points accept a stack of right-hand sides (one per row) and reuse the
expensive part of the solve across them.
"""

import logging
import warnings
from typing import Callable, Iterator, Optional

import numpy as np
import scipy.linalg
from tqdm import tqdm

from fairij.config import IhvpConfig
from fairij.data import TabularDataset
from fairij.errors import CapacityError, DivergenceError, InputError, NumericalBreakdownError, SolveError
from fairij.model import MlpModel, ParamVector, loss_grad_sum, per_instance_grads

logger = logging.getLogger(__name__)

BREAKDOWN_TOL = 1e-12
DIVERGENCE_FACTOR = 1e8
FD_STEP = 1e-4

GradFn = Callable[[np.ndarray], np.ndarray]


class GradientStream:
    """Per-instance training gradients in a fixed, seeded order.

    Gradients are produced in chunks so that an N x D matrix is never held
    in memory for large N. Iterating twice yields the same sequence.

    Attributes:
        order (np.ndarray): Row order the gradients are delivered in
    """

    def __init__(
        self,
        source: Callable[[np.ndarray], np.ndarray],
        n: int,
        order: np.ndarray,
        chunk_size: int = 512,
    ):
        if n < 1:
            raise InputError("gradient stream needs at least one instance")
        self._source = source
        self._n = n
        self.order = order
        self.chunk_size = chunk_size

    @classmethod
    def for_model(
        cls, model: MlpModel, train: TabularDataset, seed: int, chunk_size: int = 512
    ) -> "GradientStream":
        order = np.random.default_rng(seed).permutation(len(train))

        def source(rows: np.ndarray) -> np.ndarray:
            return per_instance_grads(model, train.features[rows], train.labels[rows])

        return cls(source, len(train), order, chunk_size)

    @classmethod
    def from_array(cls, gradients: np.ndarray) -> "GradientStream":
        """Stream precomputed gradient rows in their given order."""
        gradients = np.atleast_2d(np.asarray(gradients, dtype=np.float64))
        return cls(lambda rows: gradients[rows], gradients.shape[0], np.arange(gradients.shape[0]))

    def __len__(self) -> int:
        return self._n

    def chunks(self, limit: Optional[int] = None) -> Iterator[np.ndarray]:
        stop = self._n if limit is None else min(limit, self._n)
        for start in range(0, stop, self.chunk_size):
            yield self._source(self.order[start:min(start + self.chunk_size, stop)])

    def __iter__(self) -> Iterator[np.ndarray]:
        for chunk in self.chunks():
            yield from chunk


def _as_rows(vectors) -> np.ndarray:
    if isinstance(vectors, ParamVector):
        vectors = vectors.values
    return np.atleast_2d(np.asarray(vectors, dtype=np.float64))


def woodfisher_many(stream: GradientStream, vectors: np.ndarray, cfg: IhvpConfig) -> np.ndarray:
    """Coupled o/k recurrence run once for every row of ``vectors``.

    The o-recurrence does not depend on v, so all right-hand sides share it.
    """
    V = _as_rows(vectors)
    n_total = len(stream)
    budget = cfg.iterations
    if budget > n_total:
        raise InputError(f"woodfisher iterations ({budget}) exceed the training set size ({n_total})")
    lam = cfg.damping
    o: Optional[np.ndarray] = None
    K = V.T / lam
    step = 0
    progress = tqdm(total=budget, desc="woodfisher", disable=None, leave=False)
    for chunk in stream.chunks(limit=budget):
        for g in chunk:
            step += 1
            progress.update(1)
            if o is None:
                o = g / lam
                continue
            go = float(g @ o)
            denom = n_total + go
            if abs(denom) < BREAKDOWN_TOL:
                progress.close()
                raise NumericalBreakdownError(f"woodfisher denominator vanished at step {step} ({denom!r})")
            gk = g @ K
            K = K - np.outer(o, gk) / denom
            o = o - o * (go / denom)
    progress.close()
    return cfg.wf_scale * K.T


def ihvp_woodfisher(stream: GradientStream, v: ParamVector, cfg: IhvpConfig) -> ParamVector:
    """IHVP-WoodFisher: B - 1 rank-one updates starting from o = g_1/λ, k = v/λ."""
    return ParamVector(woodfisher_many(stream, v, cfg)[0])


def finite_difference_hvp(grad_fn: GradFn, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Central-difference Hessian-vector product of the function whose gradient is ``grad_fn``."""
    u_norm = float(np.linalg.norm(u))
    if u_norm == 0.0:
        return np.zeros_like(theta)
    eps = FD_STEP * (1.0 + float(np.linalg.norm(theta))) / (u_norm + 1e-12)
    return (grad_fn(theta + eps * u) - grad_fn(theta - eps * u)) / (2.0 * eps)


def hessian_matrix(grad_fn: GradFn, theta: np.ndarray) -> np.ndarray:
    """Dense Hessian by central differences, one column per coordinate, symmetrized."""
    d = theta.shape[0]
    H = np.empty((d, d))
    eye = np.eye(d)
    for j in tqdm(range(d), desc="hessian", disable=None, leave=False):
        H[:, j] = finite_difference_hvp(grad_fn, theta, eye[j])
    return 0.5 * (H + H.T)


def neumann_solve(
    hvp: Callable[[np.ndarray], np.ndarray], v: np.ndarray, iterations: int, scale: float
) -> np.ndarray:
    """Truncated Neumann series for H^{-1} v; converges when H's spectrum lies in (0, scale)."""
    v = np.asarray(v, dtype=np.float64)
    limit = DIVERGENCE_FACTOR * float(np.linalg.norm(v))
    u = v.copy()
    for step in range(1, iterations + 1):
        u = v + u - hvp(u) / scale
        norm = float(np.linalg.norm(u))
        if not np.isfinite(norm) or norm > limit:
            raise DivergenceError(
                f"neumann iterate norm {norm:.3e} exceeds {limit:.3e} at step {step}; "
                f"the Hessian spectrum is outside [0, {scale}]"
            )
    return u / scale


def exact_solve(hessian: np.ndarray, vectors: np.ndarray, damping: float) -> np.ndarray:
    """Solve (H + λI) X = V for every row of V in one factorization."""
    V = _as_rows(vectors)
    system = hessian + damping * np.eye(hessian.shape[0])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            solution = scipy.linalg.solve(system, V.T, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as e:
        raise SolveError(f"damped Hessian system (λ={damping}) could not be solved: {e}") from e
    if not np.all(np.isfinite(solution)):
        raise SolveError(f"damped Hessian system (λ={damping}) produced non-finite values")
    return solution.T


def mean_loss_grad_fn(model: MlpModel, train: TabularDataset) -> GradFn:
    n = len(train)
    if n == 0:
        raise InputError("training set is empty")

    def grad_fn(values: np.ndarray) -> np.ndarray:
        return loss_grad_sum(model.with_params(values), train.features, train.labels) / n

    return grad_fn


def neumann_many(model: MlpModel, train: TabularDataset, vectors: np.ndarray, cfg: IhvpConfig) -> np.ndarray:
    grad_fn = mean_loss_grad_fn(model, train)
    theta = model.params.values

    def hvp(u: np.ndarray) -> np.ndarray:
        return finite_difference_hvp(grad_fn, theta, u)

    rows = [neumann_solve(hvp, v, cfg.iterations, cfg.neumann_scale) for v in _as_rows(vectors)]
    return cfg.wf_scale * np.vstack(rows)


def ihvp_neumann(model: MlpModel, train: TabularDataset, v: ParamVector, cfg: IhvpConfig) -> ParamVector:
    return ParamVector(neumann_many(model, train, v, cfg)[0])


def exact_many(model: MlpModel, train: TabularDataset, vectors: np.ndarray, cfg: IhvpConfig) -> np.ndarray:
    if model.num_params > cfg.exact_max_params:
        raise CapacityError(
            f"exact IHVP needs a dense {model.num_params}x{model.num_params} Hessian; "
            f"cap is exact_max_params={cfg.exact_max_params}"
        )
    hessian = hessian_matrix(mean_loss_grad_fn(model, train), model.params.values)
    return cfg.wf_scale * exact_solve(hessian, vectors, cfg.damping)


def ihvp_exact(model: MlpModel, train: TabularDataset, v: ParamVector, cfg: IhvpConfig) -> ParamVector:
    """Damped direct solve against the finite-difference Hessian of the mean training loss."""
    return ParamVector(exact_many(model, train, v, cfg)[0])


def ihvp_many(model: MlpModel, train: TabularDataset, vectors: np.ndarray, cfg: IhvpConfig) -> np.ndarray:
    """Dispatch a stack of right-hand sides to the configured engine."""
    V = _as_rows(vectors)
    if V.shape[1] != model.num_params:
        raise InputError(f"right-hand sides have length {V.shape[1]}, model has {model.num_params} parameters")
    logger.debug(f"Solving {V.shape[0]} IHVP(s) with {cfg.method} (D={model.num_params})")
    if cfg.method == "woodfisher":
        stream = GradientStream.for_model(model, train, cfg.instance_order_seed)
        return woodfisher_many(stream, V, cfg)
    if cfg.method == "neumann":
        return neumann_many(model, train, V, cfg)
    return exact_many(model, train, V, cfg)


def ihvp(model: MlpModel, train: TabularDataset, v: ParamVector, cfg: IhvpConfig) -> ParamVector:
    return ParamVector(ihvp_many(model, train, v, cfg)[0])
