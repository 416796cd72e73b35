"""Model core: the MLP classifier family, its BCE loss and hand-derived gradients.

Everything downstream (training, fairness surrogates, IHVP engines, influence)
consumes the batched forward/backward passes defined here. The parameter
vector is laid out layer by layer as the row-major (fan_in x fan_out) weight
matrix followed by the bias vector, ending with the single-logit output layer.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from fairij.config import MlpArchitecture
from fairij.errors import InputError
from fairij.utils import read_json, write_json

logger = logging.getLogger(__name__)

PROBA_EPS = 1e-12
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

Layer = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flattened parameters (or any vector in parameter space), float64 and finite."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(values)):
            raise InputError("ParamVector entries must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, size: int) -> "ParamVector":
        return cls(np.zeros(size))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector(self.values + _as_array(other))

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return ParamVector(self.values - _as_array(other))

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self.values)

    def dot(self, other: "ParamVector") -> float:
        return float(np.dot(self.values, _as_array(other)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def to_list(self) -> List[float]:
        return self.values.tolist()


def _as_array(vector: Union[ParamVector, np.ndarray]) -> np.ndarray:
    return vector.values if isinstance(vector, ParamVector) else np.asarray(vector, dtype=np.float64)


class Instance(NamedTuple):
    """A single training example z = (x, s, y)."""

    x: np.ndarray
    s: int
    y: int


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Architecture descriptor plus parameter vector; immutable."""

    arch: MlpArchitecture
    params: ParamVector

    def __post_init__(self):
        if len(self.params) != self.arch.num_params:
            raise InputError(
                f"parameter vector has length {len(self.params)}, architecture needs {self.arch.num_params}"
            )

    @property
    def num_params(self) -> int:
        return self.arch.num_params

    def with_params(self, params: Union[ParamVector, np.ndarray]) -> "MlpModel":
        if not isinstance(params, ParamVector):
            params = ParamVector(params)
        return MlpModel(self.arch, params)

    def layers(self) -> List[Layer]:
        return unflatten(self.arch, self.params.values)


def unflatten(arch: MlpArchitecture, values: np.ndarray) -> List[Layer]:
    """Split a flat vector into per-layer (W, b) views."""
    layers = []
    offset = 0
    for fan_in, fan_out in arch.layer_shapes:
        weight = values[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = values[offset:offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def flatten(layers: List[Layer]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.reshape(-1), b.reshape(-1)]) for w, b in layers])


def init_params(arch: MlpArchitecture, seed: int) -> ParamVector:
    """Seeded uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in arch.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        bias = rng.uniform(-bound, bound, size=fan_out)
        layers.append((weight, bias))
    return ParamVector(flatten(layers))


def init_model(arch: MlpArchitecture, seed: int) -> MlpModel:
    return MlpModel(arch, init_params(arch, seed))


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "selu":
        return SELU_SCALE * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "selu":
        return SELU_SCALE * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))
    if activation == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class _ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    logits: np.ndarray


def _forward(model: MlpModel, features: np.ndarray) -> _ForwardCache:
    layers = model.layers()
    a = features
    inputs, pre = [], []
    for weight, bias in layers[:-1]:
        inputs.append(a)
        z = a @ weight + bias
        pre.append(z)
        a = _activate(z, model.arch.activation)
    inputs.append(a)
    weight, bias = layers[-1]
    logits = (a @ weight + bias)[:, 0]
    return _ForwardCache(inputs, pre, logits)


def _check_features(model: MlpModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    if features.ndim != 2 or features.shape[1] != model.arch.input_dim:
        raise InputError(
            f"expected features of width {model.arch.input_dim}, got shape {features.shape}"
        )
    if not np.all(np.isfinite(features)):
        raise InputError("features contain non-finite values")
    return features


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.all((labels == 0) | (labels == 1)):
        raise InputError("labels must be 0 or 1")
    return labels


def _clamped(logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilities clamped to [eps, 1-eps] and the mask where no clamping happened."""
    raw = expit(logits)
    inside = (raw > PROBA_EPS) & (raw < 1.0 - PROBA_EPS)
    return np.clip(raw, PROBA_EPS, 1.0 - PROBA_EPS), inside


def logits(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Pre-sigmoid outputs, unclamped."""
    return _forward(model, _check_features(model, features)).logits


def saturated(logit_values: np.ndarray) -> np.ndarray:
    """Mask of instances whose probability gets clamped; their loss gradient is zero."""
    return ~_clamped(np.asarray(logit_values, dtype=np.float64))[1]


def predict_proba(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """Batched forward pass; probabilities in [1e-12, 1 - 1e-12]."""
    features = _check_features(model, features)
    proba, _ = _clamped(_forward(model, features).logits)
    return proba


def forward(model: MlpModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"forward takes a single feature vector, got shape {x.shape}")
    return float(predict_proba(model, x)[0])


def bce(proba: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return -(labels * np.log(proba) + (1.0 - labels) * np.log1p(-proba))


def losses(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = _check_labels(labels)
    return bce(predict_proba(model, features), labels)


def loss_instance(model: MlpModel, z: Instance) -> float:
    return float(losses(model, np.asarray(z.x, dtype=np.float64), np.array([z.y]))[0])


def mean_loss(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(losses(model, features, labels)))


def _backward(
    model: MlpModel, cache: _ForwardCache, delta: np.ndarray, per_instance: bool
) -> np.ndarray:
    """Backpropagate d(objective)/d(logit) = delta through the network.

    Returns the flat gradient summed over instances, or N x D rows when
    ``per_instance`` is set.
    """
    layers = model.layers()
    n = delta.shape[0]
    grads: List[Layer] = []
    upstream = delta[:, None]
    for index in range(len(layers) - 1, -1, -1):
        weight, _ = layers[index]
        a_in = cache.inputs[index]
        if per_instance:
            grad_w = np.einsum("ni,nj->nij", a_in, upstream).reshape(n, -1)
            grad_b = upstream
        else:
            grad_w = a_in.T @ upstream
            grad_b = upstream.sum(axis=0)
        grads.append((grad_w, grad_b))
        if index > 0:
            upstream = (upstream @ weight.T) * _activate_grad(
                cache.pre_activations[index - 1], model.arch.activation
            )
    grads.reverse()
    if per_instance:
        return np.concatenate([np.concatenate([gw, gb], axis=1) for gw, gb in grads], axis=1)
    return np.concatenate([np.concatenate([gw.reshape(-1), gb.reshape(-1)]) for gw, gb in grads])


def _loss_delta(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> Tuple[_ForwardCache, np.ndarray]:
    features = _check_features(model, features)
    labels = _check_labels(labels)
    if labels.shape[0] != features.shape[0]:
        raise InputError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
    cache = _forward(model, features)
    proba, inside = _clamped(cache.logits)
    return cache, np.where(inside, proba - labels, 0.0)


def per_instance_grads(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-instance BCE gradients as an N x D array."""
    cache, delta = _loss_delta(model, features, labels)
    return _backward(model, cache, delta, per_instance=True)


def loss_grad_sum(
    model: MlpModel, features: np.ndarray, labels: np.ndarray, weights: Optional[np.ndarray] = None
) -> np.ndarray:
    """Sum of (optionally weighted) per-instance BCE gradients via one backward pass."""
    cache, delta = _loss_delta(model, features, labels)
    if weights is not None:
        delta = delta * weights
    return _backward(model, cache, delta, per_instance=False)


def output_grad_sum(model: MlpModel, features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Sum over instances of weights[i] * d h(x_i) / d theta, h the clamped probability."""
    features = _check_features(model, features)
    cache = _forward(model, features)
    raw = expit(cache.logits)
    _, inside = _clamped(cache.logits)
    delta = np.where(inside, raw * (1.0 - raw), 0.0) * weights
    return _backward(model, cache, delta, per_instance=False)


def grad_instance(model: MlpModel, z: Instance) -> ParamVector:
    if z.y not in (0, 1):
        raise InputError(f"label must be 0 or 1, got {z.y}")
    return ParamVector(per_instance_grads(model, np.asarray(z.x, dtype=np.float64), np.array([z.y]))[0])


def mean_grad(model: MlpModel, dataset) -> ParamVector:
    """Mean per-instance gradient over a TabularDataset."""
    if len(dataset) == 0:
        raise InputError("mean_grad needs a non-empty dataset")
    total = loss_grad_sum(model, dataset.features, dataset.labels)
    return ParamVector(total / len(dataset))


def accuracy(model: MlpModel, features: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    predictions = (predict_proba(model, features) >= threshold).astype(np.float64)
    return float(np.mean(predictions == np.asarray(labels, dtype=np.float64)))


def save_checkpoint(model: MlpModel, path: Union[str, Path], seed: int, created_by: str = "fairij") -> Path:
    payload = {
        "arch": model.arch.model_dump(),
        "params": model.params.to_list(),
        "seed": seed,
        "created_by": created_by,
    }
    return write_json(payload, path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[MlpModel, int]:
    payload = read_json(path)
    try:
        arch = MlpArchitecture(**payload["arch"])
        model = MlpModel(arch, ParamVector(payload["params"]))
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"invalid checkpoint {path}: {e}") from e
    logger.info(f"Loaded checkpoint {path} with {model.num_params} parameters")
    return model, int(payload.get("seed", 0))
