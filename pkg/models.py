from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Activation = Literal["tanh", "softplus", "identity", "square"]
TimeEmbedding = Literal["raw", "sinusoidal"]


# Network Models
class NetworkSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(..., ge=1)
    hidden_widths: List[int] = Field(default_factory=lambda: [64, 64])
    activation: Activation = "tanh"
    use_indicator: bool = False
    time_embedding: TimeEmbedding = "raw"
    frequencies: int = Field(4, ge=1)

    @field_validator("hidden_widths")
    @classmethod
    def check_hidden_widths(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("hidden_widths must contain at least one layer")
        if any(w < 1 for w in v):
            raise ValueError("hidden widths must be positive")
        return v

    @property
    def time_width(self) -> int:
        if self.time_embedding == "raw":
            return 1
        return 1 + 2 * self.frequencies


class FieldSpec(NetworkSpec):
    """Scalar potential s(t, x, k): inputs are x, time features and the optional indicator."""

    @property
    def in_width(self) -> int:
        return self.input_dim + self.time_width + (1 if self.use_indicator else 0)

    @property
    def out_width(self) -> int:
        return 1


class PathSpec(NetworkSpec):
    """Correction network (t, x_left, x_right, k) -> R^d shared by every interval."""

    use_indicator: bool = True
    indicator_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    shared_across_intervals: Literal[True] = True

    @property
    def in_width(self) -> int:
        return 2 * self.input_dim + self.time_width + (1 if self.use_indicator else 0)

    @property
    def out_width(self) -> int:
        return self.input_dim


# Problem Models
class DiffusionSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["constant", "piecewise_constant", "affine"] = "constant"
    values: List[float] = Field(default_factory=lambda: [1.0])
    breakpoints: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_shape(self) -> "DiffusionSchedule":
        if any(v < 0 for v in self.values):
            raise ValueError("diffusion values must be nonnegative")
        if self.kind == "constant" and len(self.values) != 1:
            raise ValueError("constant schedule takes exactly one value")
        if self.kind == "affine" and len(self.values) != 2:
            raise ValueError("affine schedule takes [sigma_0, sigma_1]")
        if self.kind == "piecewise_constant":
            if len(self.values) != len(self.breakpoints) + 1:
                raise ValueError("piecewise schedule needs len(values) == len(breakpoints) + 1")
            if sorted(self.breakpoints) != list(self.breakpoints):
                raise ValueError("breakpoints must be increasing")
        return self


class PotentialSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["linear_per_interval", "analytic_quadratic", "callback"]
    interval_times: List[float] = Field(default_factory=list)
    accelerations: List[List[float]] = Field(default_factory=list)
    quadratic: Optional[List[List[float]]] = None
    linear: Optional[List[float]] = None
    callback: Optional[str] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_kind(self) -> "PotentialSpec":
        if self.kind == "linear_per_interval":
            if len(self.interval_times) < 2:
                raise ValueError("linear_per_interval needs at least two interval times")
            if len(self.accelerations) != len(self.interval_times) - 1:
                raise ValueError("one acceleration vector is required per interval")
            if sorted(self.interval_times) != list(self.interval_times):
                raise ValueError("interval_times must be increasing")
        elif self.kind == "analytic_quadratic":
            if self.quadratic is None and self.linear is None:
                raise ValueError("analytic_quadratic needs a quadratic matrix or a linear vector")
        elif not self.callback:
            raise ValueError("callback potential needs a registered callback name")
        return self


class ProblemSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kinetic: Literal["W2", "WFR"] = "W2"
    growth_weight: Optional[float] = None
    entropic: Optional[DiffusionSchedule] = None
    potential: Optional[PotentialSpec] = None
    potential_weight: float = 1.0
    notes: str = ""

    @model_validator(mode="after")
    def check_combination(self) -> "ProblemSpec":
        if self.kinetic == "WFR" and (self.growth_weight is None or self.growth_weight <= 0):
            raise ValueError("WFR kinetic energy requires growth_weight > 0")
        if self.entropic is not None and self.kinetic != "W2":
            raise ValueError("entropic (Schrodinger bridge) mode requires the W2 kinetic energy")
        return self

    @property
    def is_entropic(self) -> bool:
        return self.entropic is not None


# Training Models
class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(256, ge=1)
    iterations: int = Field(2000, ge=0)
    optimizer: Literal["adam"] = "adam"
    lr_field: float = Field(1e-3, gt=0)
    lr_path: float = Field(1e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    refine_steps: int = Field(0, ge=0)
    refine_alpha: Optional[float] = Field(None, gt=0)
    seed: int = 0
    eval_every: int = Field(500, ge=1)
    log_every: int = Field(10, ge=1)
    theta_steps_per_eta: int = Field(1, ge=1)
    time_sampling: Literal["uniform", "stratified"] = "uniform"
    divergence_bound: float = Field(1e6, gt=0)
    eval_batch_size: int = Field(4096, ge=1)
    train_path: bool = True


class IntervalReport(BaseModel):
    index: int
    t_left: float
    t_right: float
    boundary_term: float
    integrand_term: float
    dual_estimate: float


class DualReport(BaseModel):
    boundary_term: float
    integrand_term: float
    dual_estimate: float
    intervals: List[IntervalReport] = Field(default_factory=list)
    n: int
    seed: int


class HistoryRecord(BaseModel):
    step: int
    dual: float
    boundary: float
    integrand: float
    grad_norm_field: float
    grad_norm_path: float
    seconds: float


class TrainHistory(BaseModel):
    records: List[HistoryRecord] = Field(default_factory=list)

    def append(self, record: HistoryRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("history steps must be increasing")
        self.records.append(record)


# Evaluation Models
class EvalRow(BaseModel):
    held_out_index: int
    held_out_time: float
    seed: int
    w1_path: float = Field(..., ge=0)
    w1_simulated: float = Field(..., ge=0)
    w1_baseline: float = Field(..., ge=0)


class EvalTable(BaseModel):
    label: str = ""
    rows: List[EvalRow] = Field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0
    mean_simulated: float = 0.0
    mean_baseline: float = 0.0
    metadata: Dict[str, Any] = Field(default_factory=dict)


class TimeResidual(BaseModel):
    t: float
    residual: float


class HJReport(BaseModel):
    per_time: List[TimeResidual]
    mean: float


# Dataset / evaluation configuration
class DatasetRef(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["synthetic", "files"] = "synthetic"
    kind: Optional[str] = None
    seed: int = 0
    n: int = Field(1000, ge=1)
    dim: int = Field(2, ge=1)
    params: Dict[str, Any] = Field(default_factory=dict)
    pattern: Optional[str] = None

    @model_validator(mode="after")
    def check_source(self) -> "DatasetRef":
        if self.source == "synthetic" and not self.kind:
            raise ValueError("synthetic dataset needs a kind")
        if self.source == "files" and not self.pattern:
            raise ValueError("file dataset needs a pattern")
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seeds: List[int] = Field(default_factory=lambda: [0])
    held_out: Optional[List[int]] = None
    potential: Literal["none", "mean_acceleration"] = "none"
    use_held_out_mean: bool = False
    simulate_steps: int = Field(100, ge=1)
    subsample: int = Field(512, ge=1)


# Error Models
class ErrorDetail(BaseModel):
    code: str
    message: str
    details: Optional[str] = None
