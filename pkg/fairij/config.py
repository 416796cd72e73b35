from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from fairij.errors import ConfigError
from fairij.utils import nest, parse_assignments, read_config_file


class FairnessMetricKind(str, Enum):
    """Group-fairness metric targeted by a surrogate, an influence report or a search."""

    DP = "dp"
    EO = "eo"
    EQOPP = "eqopp"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class MlpArchitecture(_Frozen):
    """Descriptor of the fully connected binary classifier family.

    An empty ``hidden_widths`` list is logistic regression. The output is always
    a single logit. Parameters are laid out layer by layer as the row-major
    weight matrix (fan_in x fan_out) followed by the bias vector.

    Attributes:
        input_dim (int): Number of input features
        hidden_widths (List[int]): Width of each hidden layer
        activation (str): Hidden activation, one of selu, relu, identity
    """

    input_dim: int = Field(ge=1)
    hidden_widths: List[int] = Field(default_factory=list)
    activation: Literal["selu", "relu", "identity"] = "selu"

    @field_validator("hidden_widths")
    @classmethod
    def _positive_widths(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError(f"every hidden width must be >= 1, got {widths}")
        return widths

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_widths, 1]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)


class TrainConfig(_Frozen):
    """Minibatch ERM settings. Defaults follow the tabular setup (Adam, 1e-4, batch 256, 100 epochs)."""

    epochs: int = Field(100, ge=1)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    seed: int = 0
    checkpoint_selection: Literal["best_val_accuracy", "last"] = "best_val_accuracy"
    weight_decay: float = Field(0.0, ge=0)


class DataSchema(_Frozen):
    """How a CSV file maps onto (features, sensitive attribute, label).

    Attributes:
        label_column (str): Column holding the target
        sensitive_column (str): Column holding the protected attribute
        positive_label_value (str): Label value mapped to y = 1
        privileged_value (str): Sensitive value mapped to s = 1
        categorical_columns (List[str]): Columns one-hot encoded
        drop_columns (List[str]): Columns ignored entirely
        column_names (List[str]): Header to use when the file has none
        skip_rows (int): Leading lines to skip before the data
        na_values (List[str]): Cell values treated as missing
        include_sensitive_as_feature (bool): Keep the sensitive column among the features
    """

    label_column: str
    sensitive_column: str
    positive_label_value: str
    privileged_value: str
    categorical_columns: List[str] = Field(default_factory=list)
    drop_columns: List[str] = Field(default_factory=list)
    column_names: Optional[List[str]] = None
    skip_rows: int = Field(0, ge=0)
    na_values: List[str] = Field(default_factory=lambda: ["?", ""])
    include_sensitive_as_feature: bool = False

    @field_validator("positive_label_value", "privileged_value", mode="before")
    @classmethod
    def _as_text(cls, value: Any) -> Any:
        # key=value files parse 1 as a number
        return str(value) if isinstance(value, (int, float)) and not isinstance(value, bool) else value

    @model_validator(mode="after")
    def _no_overlap(self) -> "DataSchema":
        used = {self.label_column, self.sensitive_column, *self.categorical_columns}
        overlap = used.intersection(self.drop_columns)
        if overlap:
            raise ValueError(f"drop_columns overlaps used columns: {sorted(overlap)}")
        return self


class DataConfig(DataSchema):
    """A DataSchema plus where the data lives and how it is split."""

    path: str
    test_path: Optional[str] = None
    test_skip_rows: int = Field(0, ge=0)
    fractions: Tuple[float, float, float] = (0.5, 0.2, 0.3)
    val_fraction: float = Field(0.33, gt=0, lt=1)

    def schema_only(self) -> DataSchema:
        return DataSchema(**self.model_dump(include=set(DataSchema.model_fields)))


class IhvpConfig(_Frozen):
    """Settings for the inverse-Hessian-vector-product engines.

    ``wf_scale`` multiplies the returned IHVP of every engine; it is the
    scaling factor the mitigation search selects. ``damping`` is the lambda
    of the WoodFisher initialization and the ridge added by the exact solve.
    """

    method: Literal["woodfisher", "neumann", "exact"] = "woodfisher"
    iterations: int = Field(1000, ge=1)
    damping: float = Field(1.0, ge=0)
    neumann_scale: float = Field(25.0, gt=0)
    wf_scale: float = Field(1.0, gt=0)
    instance_order_seed: int = 0
    exact_max_params: int = Field(2000, ge=1)

    @model_validator(mode="after")
    def _woodfisher_needs_damping(self) -> "IhvpConfig":
        if self.method == "woodfisher" and self.damping <= 0:
            raise ValueError("woodfisher requires damping > 0")
        return self


DEFAULT_SCALE_GRID = [0.01, 0.1, 1.0, 2.0, 3.0, 5.0, 10.0]


class MitigationConfig(_Frozen):
    """Fair-IJ search settings.

    When ``k_grid`` is omitted the grid is ``k_points`` values spread uniformly
    over [0, min(k_max, K)] where K is the number of positively influential
    training instances.
    """

    metric: FairnessMetricKind = FairnessMetricKind.DP
    selection: Literal["fairness_only", "loss_aware"] = "fairness_only"
    k_grid: Optional[List[int]] = None
    k_max: int = Field(2000, ge=0)
    k_points: int = Field(40, ge=1)
    scale_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_SCALE_GRID))
    search: Literal["grid", "early_stop"] = "grid"
    threshold: float = Field(0.5, gt=0, lt=1)
    ihvp: IhvpConfig = Field(default_factory=IhvpConfig)

    @field_validator("k_grid")
    @classmethod
    def _valid_k_grid(cls, grid: Optional[List[int]]) -> Optional[List[int]]:
        if grid is not None:
            if not grid:
                raise ValueError("k_grid must not be empty")
            if any(k < 0 for k in grid):
                raise ValueError(f"k_grid values must be non-negative, got {grid}")
        return grid

    @field_validator("scale_grid")
    @classmethod
    def _valid_scale_grid(cls, grid: List[float]) -> List[float]:
        if not grid:
            raise ValueError("scale_grid must not be empty")
        if any(s <= 0 for s in grid):
            raise ValueError(f"scale_grid values must be positive, got {grid}")
        return grid


class ModelConfig(_Frozen):
    """Architecture settings; input_dim comes from the data."""

    hidden_widths: List[int] = Field(default_factory=lambda: [100])
    activation: Literal["selu", "relu", "identity"] = "selu"

    def architecture(self, input_dim: int) -> MlpArchitecture:
        return MlpArchitecture(
            input_dim=input_dim, hidden_widths=self.hidden_widths, activation=self.activation
        )


class StudyConfig(_Frozen):
    """Two-moons IHVP accuracy study (influence of training points on one test point's loss)."""

    n: int = Field(10000, ge=4)
    noise: float = Field(0.1, ge=0)
    separation: float = 1.0
    test_fraction: float = Field(0.2, gt=0, lt=1)
    depths: List[int] = Field(default_factory=lambda: [1, 2, 3])
    width: int = Field(5, ge=1)
    activation: Literal["selu", "relu", "identity"] = "selu"
    runs: int = Field(10, ge=1)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    iterations: int = Field(1000, ge=1)
    neumann_scale: float = Field(25.0, gt=0)
    woodfisher_damping: float = Field(1.0, gt=0)
    exact_damping: float = Field(1e-3, ge=0)


class Settings(BaseSettings):
    """Environment fallbacks (FAIRIJ_SEED)."""

    model_config = SettingsConfigDict(env_prefix="FAIRIJ_")

    seed: Optional[int] = None


class RunConfig(_Frozen):
    """Everything a CLI run needs, resolved from a config file plus overrides."""

    data: Optional[DataConfig] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ihvp: IhvpConfig = Field(default_factory=IhvpConfig)
    mitigation: MitigationConfig = Field(default_factory=MitigationConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)
    output_dir: str = "runs"
    seed: Optional[int] = None
    trials: int = Field(1, ge=1)
    jobs: int = Field(1, ge=1)

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env_seed = Settings().seed
        return env_seed if env_seed is not None else 0

    def mitigation_config(self) -> MitigationConfig:
        return self.mitigation.model_copy(update={"ihvp": self.ihvp})

    def require_data(self) -> DataConfig:
        if self.data is None:
            raise ConfigError("this command needs a [data] section (data.path, data.label_column, ...)")
        return self.data


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    **shortcuts: Any,
) -> RunConfig:
    """Resolve a RunConfig from a key=value file, ``--set`` overrides and named flags.

    Later sources win: file, then overrides, then shortcuts whose value is
    not None. Shortcut names use ``__`` for the dot (``mitigation__metric``).
    """
    flat: Dict[str, Any] = read_config_file(path)
    flat.update(parse_assignments(overrides, source="--set"))
    for name, value in shortcuts.items():
        if value is not None:
            flat[name.replace("__", ".")] = value
    try:
        return RunConfig(**nest(flat))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
