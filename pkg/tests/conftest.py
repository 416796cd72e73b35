import numpy as np
import pytest

from fairij.config import MlpArchitecture
from fairij.data import TabularDataset
from fairij.model import MlpModel, ParamVector, init_params


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale studies")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(features, labels, sensitive=None, name="toy") -> TabularDataset:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    labels = np.asarray(labels)
    sensitive = labels if sensitive is None else np.asarray(sensitive)
    return TabularDataset(
        features=features,
        sensitive=sensitive,
        labels=labels,
        feature_names=[f"f{i}" for i in range(features.shape[1])],
        name=name,
    )


def biased_mixture(n: int, seed: int, dim: int = 3, name: str = "mixture") -> TabularDataset:
    """Labels depend on the features and on s, so a fitted model is unfair in s."""
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, size=n)
    x = rng.normal(size=(n, dim))
    x[:, 0] += 0.8 * s
    logits = 1.5 * x[:, 0] - 0.5 * x[:, 1] + 0.7 * s - 0.4
    y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-logits))).astype(int)
    # every (s, y) cell non-empty
    y[:2], s[:2] = [0, 1], [0, 0]
    y[2:4], s[2:4] = [0, 1], [1, 1]
    return make_dataset(x, y, s, name=name)


def random_model(input_dim: int, hidden_widths, seed: int, activation: str = "selu", spread: float = 1.0) -> MlpModel:
    arch = MlpArchitecture(input_dim=input_dim, hidden_widths=list(hidden_widths), activation=activation)
    values = init_params(arch, seed).values * spread
    return MlpModel(arch, ParamVector(values))


def logistic(weights, bias) -> MlpModel:
    weights = list(weights)
    arch = MlpArchitecture(input_dim=len(weights), hidden_widths=[])
    return MlpModel(arch, ParamVector(np.array([*weights, bias], dtype=np.float64)))


@pytest.fixture
def mixture():
    return biased_mixture(120, seed=3)
