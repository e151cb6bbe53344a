from datetime import datetime
from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field as PydanticField,
    PrivateAttr,
    ValidationError,
    field_validator,
    model_validator,
)
from scipy.interpolate import CubicHermiteSpline
from sqlmodel import Field, Relationship, SQLModel

from app.errors import ConfigurationError


class ArrayModel(BaseModel):
    """Immutable container whose fields may be numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class ConfigModel(BaseModel):
    """Settings model whose invalid values surface as ConfigurationError."""

    def __init__(self, **data):
        try:
            super().__init__(**data)
        except ValidationError as exc:
            raise ConfigurationError(f"invalid {type(self).__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# Kernel configuration
# ---------------------------------------------------------------------------

class KernelConfig(ConfigModel):
    f: float = PydanticField(gt=0.0, le=0.5, description="Fraction of active neurons")
    tau: Optional[float] = PydanticField(default=None, ge=0.0)
    sigma: Optional[float] = PydanticField(default=None, gt=0.0)
    depth: int = PydanticField(default=1, ge=1)
    ridge: float = PydanticField(default=0.0, ge=0.0)
    offset: float = PydanticField(default=0.0, ge=0.0)

    @model_validator(mode="after")
    def derive_threshold_and_scale(self) -> "KernelConfig":
        # tau is always derived from f; sigma defaults to sigma*(tau)
        from app.kernel_core import sigma_star, tau_from_f

        self.tau = tau_from_f(self.f)
        if self.sigma is None:
            self.sigma = sigma_star(self.tau)
        return self


class LookupTable(ArrayModel):
    f: float
    sigma: float
    c_grid: np.ndarray
    c_out: np.ndarray
    slope: np.ndarray

    _spline: Optional[CubicHermiteSpline] = PrivateAttr(default=None)

    def model_post_init(self, context) -> None:
        # Interpolate in t = arccos(-c), where the map is smooth at both ends
        t = np.arccos(-self.c_grid)
        self._spline = CubicHermiteSpline(t, self.c_out, self.slope * np.sin(t))

    def __len__(self) -> int:
        return len(self.c_grid)

    def evaluate(self, c: np.ndarray) -> np.ndarray:
        """Interpolated c -> c' for cosines already clamped to [-1, 1]."""
        c = np.asarray(c, dtype=float)
        return self._spline(np.arccos(-c))


# ---------------------------------------------------------------------------
# Gram matrices and inference
# ---------------------------------------------------------------------------

class GramPair(ArrayModel):
    k_train: np.ndarray
    k_cross: np.ndarray
    train_norms_sq: np.ndarray
    test_norms_sq: np.ndarray
    layer: int = PydanticField(ge=0)

    @property
    def n_train(self) -> int:
        return self.k_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.k_cross.shape[0]


class Prediction(ArrayModel):
    mu: np.ndarray
    labels: np.ndarray
    mse: float = PydanticField(ge=0.0)
    accuracy: float = PydanticField(ge=0.0, le=1.0)


class Spectrum(ArrayModel):
    eta: np.ndarray
    phi: np.ndarray
    v_bar: np.ndarray
    m_total: int
    n_nonzero: int
    # Target power outside the retained modes, mean over points of sum over channels
    null_power: float = PydanticField(default=0.0, ge=0.0)

    @property
    def v_bar_sq(self) -> np.ndarray:
        """Target power per mode, summed over output channels."""
        return np.sum(self.v_bar ** 2, axis=1)


class TheoryResult(ArrayModel):
    kappa: float = PydanticField(ge=0.0)
    gamma: float = PydanticField(ge=0.0, le=1.0)
    e_rho: np.ndarray
    # Error factor for target power the kernel cannot represent
    e_null: float = PydanticField(ge=0.0)
    e_g: Optional[float] = None
    p_train: int
    ridge: float


# ---------------------------------------------------------------------------
# Finite networks
# ---------------------------------------------------------------------------

class BiasMode(str, Enum):
    QUANTILE = "quantile"
    GAUSSIAN = "gaussian"


class FiniteNetSpec(ConfigModel):
    widths: List[int] = PydanticField(min_length=1)
    f: float = PydanticField(gt=0.0, le=0.5)
    sigma: Optional[float] = PydanticField(default=None, gt=0.0)
    seed: int = PydanticField(default=0, ge=0, lt=2**64)
    bias_mode: BiasMode = BiasMode.GAUSSIAN
    # Feed sqrt(n0) * x so the layer-0 second moment is x.x, matching input_gram
    dot_product_inputs: bool = True

    @field_validator("widths")
    @classmethod
    def widths_positive(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        return widths


class MCEstimate(BaseModel):
    mean: float
    stderr: float = PydanticField(ge=0.0)
    n_units: int
    n_trials: int


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class Dataset(ArrayModel):
    x: np.ndarray
    y: np.ndarray
    labels: Optional[np.ndarray] = None
    train_idx: np.ndarray = PydanticField(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = PydanticField(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @model_validator(mode="after")
    def check_consistency(self) -> "Dataset":
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite entries")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test index lists overlap")
        return self

    @property
    def m_total(self) -> int:
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# Experiment harness
# ---------------------------------------------------------------------------

class SweepSpec(ConfigModel):
    f_values: List[float] = PydanticField(min_length=1)
    depths: List[int] = PydanticField(min_length=1)
    ridges: List[float] = PydanticField(default_factory=lambda: [0.0], min_length=1)
    p_train: int = PydanticField(gt=0)
    trials: int = PydanticField(default=1, ge=1)
    seed: int = PydanticField(default=0, ge=0)
    dataset: str = "circulant:1500:2"
    normalize: bool = False
    grid_size: Optional[int] = None

    @field_validator("f_values")
    @classmethod
    def fractions_in_range(cls, values: List[float]) -> List[float]:
        for f in values:
            if not 0.0 < f <= 0.5:
                raise ValueError(f"sparsity f must lie in (0, 0.5], got {f}")
        return values

    @field_validator("depths")
    @classmethod
    def depths_positive(cls, values: List[int]) -> List[int]:
        if any(d < 1 for d in values):
            raise ValueError(f"depths must be >= 1, got {values}")
        return values

    @field_validator("ridges")
    @classmethod
    def ridges_non_negative(cls, values: List[float]) -> List[float]:
        if any(r < 0 for r in values):
            raise ValueError(f"ridge values must be >= 0, got {values}")
        return values


# ---------------------------------------------------------------------------
# Results ledger tables
# ---------------------------------------------------------------------------

class ExperimentRun(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    command: str = Field(max_length=32, index=True)
    dataset: str = Field(max_length=500)
    seed: int
    created_at: datetime = Field(default_factory=datetime.utcnow)

    # Relationships
    sweep_records: List["SweepRecord"] = Relationship(back_populates="run")
    theory_records: List["TheoryRecord"] = Relationship(back_populates="run")
    ed_records: List["EDRecord"] = Relationship(back_populates="run")


class SweepRecord(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    f: float = Field(index=True)
    depth: int = Field(index=True)
    ridge: float
    trial: int
    accuracy: float
    mse: float
    ed: float

    # Foreign keys
    run_id: int = Field(foreign_key="experimentrun.id")

    # Relationships
    run: ExperimentRun = Relationship(back_populates="sweep_records")


class TheoryRecord(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    f: float = Field(index=True)
    depth: int = Field(index=True)
    mse_experiment: float
    e_g_theory: float

    # Foreign keys
    run_id: int = Field(foreign_key="experimentrun.id")

    # Relationships
    run: ExperimentRun = Relationship(back_populates="theory_records")


class EDRecord(SQLModel, table=True):
    id: Optional[int] = Field(default=None, primary_key=True)
    f: float = Field(index=True)
    depth: int = Field(index=True)
    ed: float

    # Foreign keys
    run_id: int = Field(foreign_key="experimentrun.id")

    # Relationships
    run: ExperimentRun = Relationship(back_populates="ed_records")
