"""Tabular datasets: CSV ingestion, standardization, seeded splits and the two-moons generator."""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.datasets import make_moons
from sklearn.preprocessing import StandardScaler

from fairij.config import DataSchema
from fairij.errors import InputError, SchemaError
from fairij.model import Instance

logger = logging.getLogger(__name__)

MIN_STDDEV = 1e-12

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
]

# Header-less UCI file; education is dropped in favour of education-num.
ADULT_SCHEMA = DataSchema(
    label_column="income",
    sensitive_column="sex",
    positive_label_value=">50K",
    privileged_value="Male",
    categorical_columns=[
        "workclass", "marital-status", "occupation", "relationship", "race", "native-country",
    ],
    drop_columns=["fnlwgt", "education"],
    column_names=ADULT_COLUMNS,
)


@dataclass(frozen=True)
class LoadReport:
    """What load_csv did to the file."""

    rows_read: int
    rows_dropped: int
    columns_used: List[str]
    one_hot_map: Dict[str, List[str]]


@dataclass(frozen=True, eq=False)
class Standardization:
    mean: np.ndarray
    scale: np.ndarray
    fitted_on: str

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale

    def to_dict(self) -> Dict:
        return {"mean": self.mean, "scale": self.scale, "fitted_on": self.fitted_on}


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """Rows of (features x, sensitive s, label y); immutable after construction."""

    features: np.ndarray
    sensitive: np.ndarray
    labels: np.ndarray
    feature_names: List[str]
    name: str = "data"
    standardization: Optional[Standardization] = None
    load_report: Optional[LoadReport] = None
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise InputError(f"{self.name}: features must be a 2-D matrix, got shape {features.shape}")
        n = features.shape[0]
        if n < 1:
            raise InputError(f"{self.name}: dataset must contain at least one row")
        if not np.all(np.isfinite(features)):
            bad = int(np.argwhere(~np.all(np.isfinite(features), axis=1))[0][0])
            raise InputError(f"{self.name}: row {bad} contains non-finite features")
        sensitive = np.asarray(self.sensitive).astype(np.int64).reshape(-1)
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        for column, values in (("sensitive", sensitive), ("labels", labels)):
            if values.shape[0] != n:
                raise InputError(f"{self.name}: {column} has {values.shape[0]} entries for {n} rows")
            if not np.all((values == 0) | (values == 1)):
                raise InputError(f"{self.name}: {column} must be binary")
        if len(self.feature_names) != features.shape[1]:
            raise InputError(
                f"{self.name}: {len(self.feature_names)} feature names for {features.shape[1]} columns"
            )
        indices = np.arange(n) if self.indices is None else np.asarray(self.indices, dtype=np.int64)
        for array in (features, sensitive, labels, indices):
            array.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "sensitive", sensitive)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", list(self.feature_names))
        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def instance(self, n: int) -> Instance:
        return Instance(self.features[n], int(self.sensitive[n]), int(self.labels[n]))

    def subset(self, rows: Sequence[int], name: Optional[str] = None) -> "TabularDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            features=self.features[rows],
            sensitive=self.sensitive[rows],
            labels=self.labels[rows],
            indices=self.indices[rows],
            name=name or self.name,
            load_report=None,
        )

    def drop(self, rows: Sequence[int]) -> "TabularDataset":
        keep = np.setdiff1d(np.arange(len(self)), np.asarray(rows, dtype=np.int64))
        return self.subset(keep)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=self.feature_names)
        frame["s"] = self.sensitive
        frame["y"] = self.labels
        return frame


def _normalize(values: pd.Series) -> pd.Series:
    return values.str.strip().str.rstrip(".")


def load_csv(
    path: Union[str, Path],
    schema: DataSchema,
    categories: Optional[Dict[str, List[str]]] = None,
    name: Optional[str] = None,
) -> TabularDataset:
    """Load a comma-separated file into a TabularDataset.

    Categorical columns are one-hot encoded in first-appearance order unless
    ``categories`` (a previous load's one_hot_map) is given, in which case
    values outside it encode as all zeros. Rows with a missing value in any
    used column are dropped and counted in the load report.
    """
    path = Path(path)
    name = name or path.stem
    try:
        df = pd.read_csv(
            path,
            header=None if schema.column_names else "infer",
            names=schema.column_names,
            skiprows=schema.skip_rows,
            dtype=str,
            keep_default_na=False,
            na_values=schema.na_values,
            skipinitialspace=True,
            index_col=False,
        )
    except FileNotFoundError as e:
        raise InputError(f"data file not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"could not parse {path}: {e}") from e

    df.columns = [str(c).strip() for c in df.columns]
    required = [schema.label_column, schema.sensitive_column, *schema.categorical_columns, *schema.drop_columns]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: columns not found in header: {missing}")

    used = [c for c in df.columns if c not in schema.drop_columns]
    feature_columns = [
        c for c in used
        if c != schema.label_column
        and (c != schema.sensitive_column or schema.include_sensitive_as_feature)
    ]
    rows_read = len(df)
    df = df[used].apply(lambda col: col.str.strip())
    complete = df.notna().all(axis=1)
    rows_dropped = int((~complete).sum())
    df = df[complete]
    if rows_dropped:
        logger.warning(f"{path}: dropped {rows_dropped} of {rows_read} rows with missing values")
    if df.empty:
        raise InputError(f"{path}: no usable rows after dropping missing values")

    labels = (_normalize(df[schema.label_column]) == schema.positive_label_value.strip().rstrip(".")).to_numpy()
    sensitive = (_normalize(df[schema.sensitive_column]) == schema.privileged_value.strip().rstrip(".")).to_numpy()

    blocks, names = [], []
    one_hot_map: Dict[str, List[str]] = {}
    for column in feature_columns:
        if column in schema.categorical_columns:
            levels = list(categories[column]) if categories and column in categories else list(pd.unique(df[column]))
            one_hot_map[column] = levels
            encoded = pd.Categorical(df[column], categories=levels)
            block = pd.get_dummies(encoded).to_numpy(dtype=np.float64)
            blocks.append(block)
            names.extend(f"{column}={level}" for level in levels)
        else:
            numeric = pd.to_numeric(df[column], errors="coerce")
            bad = numeric.isna()
            if bad.any():
                row = int(df.index[bad.to_numpy()][0])
                raise InputError(
                    f"{path}: row {row} has unparseable numeric value {df[column][row]!r} in column {column!r}"
                )
            blocks.append(numeric.to_numpy(dtype=np.float64)[:, None])
            names.append(column)

    features = np.hstack(blocks) if blocks else np.zeros((len(df), 0))
    report = LoadReport(
        rows_read=rows_read,
        rows_dropped=rows_dropped,
        columns_used=used,
        one_hot_map=one_hot_map,
    )
    logger.info(f"Loaded {len(df)} rows x {features.shape[1]} features from {path}")
    return TabularDataset(
        features=features,
        sensitive=sensitive,
        labels=labels,
        feature_names=names,
        name=name,
        load_report=report,
    )


def standardize(
    train: TabularDataset, others: Sequence[TabularDataset] = ()
) -> Tuple[TabularDataset, List[TabularDataset]]:
    """Fit per-feature mean/stddev on train and apply the same affine map to every dataset.

    Features with stddev below 1e-12 are only centered.
    """
    for other in others:
        if other.num_features != train.num_features:
            raise InputError(
                f"{other.name} has {other.num_features} features, {train.name} has {train.num_features}"
            )
    scaler = StandardScaler()
    scaler.fit(train.features)
    scale = np.where(scaler.scale_ < MIN_STDDEV, 1.0, scaler.scale_)
    state = Standardization(mean=scaler.mean_.copy(), scale=scale, fitted_on=train.name)

    def _apply(dataset: TabularDataset) -> TabularDataset:
        return replace(dataset, features=state.apply(dataset.features), standardization=state)

    return _apply(train), [_apply(other) for other in others]


def _cut_size(n: int, fraction: float) -> int:
    return int(math.floor(n * fraction + 1e-9))


def split(
    dataset: TabularDataset, fractions: Tuple[float, float, float], seed: int
) -> Tuple[TabularDataset, TabularDataset, TabularDataset]:
    """Seeded shuffle, then contiguous train/val/test cut.

    Sizes are floor(N * f); when the fractions sum to one, the rounding
    remainder goes to train.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise InputError(f"split fractions must be three positive numbers, got {fractions}")
    total = sum(fractions)
    if total > 1.0 + 1e-9:
        raise InputError(f"split fractions sum to {total}, more than 1")
    n = len(dataset)
    n_val = _cut_size(n, fractions[1])
    n_test = _cut_size(n, fractions[2])
    n_train = n - n_val - n_test if abs(total - 1.0) <= 1e-9 else _cut_size(n, fractions[0])
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    empty = [part for part, size in sizes.items() if size < 1]
    if empty:
        raise InputError(f"split of {n} rows with fractions {fractions} leaves {empty} empty")
    order = np.random.default_rng(seed).permutation(n)
    train_rows = order[:n_train]
    val_rows = order[n_train:n_train + n_val]
    test_rows = order[n_train + n_val:n_train + n_val + n_test]
    return (
        dataset.subset(train_rows, name=f"{dataset.name}-train"),
        dataset.subset(val_rows, name=f"{dataset.name}-val"),
        dataset.subset(test_rows, name=f"{dataset.name}-test"),
    )


def holdout(dataset: TabularDataset, fraction: float, seed: int) -> Tuple[TabularDataset, TabularDataset]:
    """Seeded two-way cut: (rest, held-out fraction)."""
    n = len(dataset)
    n_held = _cut_size(n, fraction)
    if n_held < 1 or n_held >= n:
        raise InputError(f"holdout fraction {fraction} of {n} rows leaves an empty side")
    order = np.random.default_rng(seed).permutation(n)
    return (
        dataset.subset(order[:n - n_held], name=f"{dataset.name}-train"),
        dataset.subset(order[n - n_held:], name=f"{dataset.name}-val"),
    )


def two_moons(n: int, noise: float, separation: float, seed: int) -> TabularDataset:
    """Two interleaving half circles, the second moved down by ``separation``.

    A separation above 0.5 (plus a margin for noise) makes the classes
    linearly separable. The sensitive attribute mirrors the label.
    """
    if n < 2 or n % 2:
        raise InputError(f"two_moons needs an even n >= 2, got {n}")
    if noise < 0:
        raise InputError(f"noise must be non-negative, got {noise}")
    features, labels = make_moons(n_samples=n, noise=noise, random_state=seed)
    features = features.copy()
    features[labels == 1, 1] -= separation
    return TabularDataset(
        features=features,
        sensitive=labels,
        labels=labels,
        feature_names=["x1", "x2"],
        name="moons",
    )
