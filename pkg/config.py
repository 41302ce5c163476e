from typing import Tuple

from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from models import DatasetRef, EvalConfig, FieldSpec, PathSpec, ProblemSpec, TrainConfig


class Settings(BaseSettings):
    # Logging
    log_level: str = "INFO"

    # Run layout
    output_dir: str = "runs"
    workers: int = 1
    seed: int = 0

    # Numerical guards
    divergence_bound: float = 1e6
    blowup_bound: float = 1e6

    # Evaluation
    w1_subsample: int = 512
    max_w1_points: int = 4096

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="WLF_",
        case_sensitive=False,
        extra="ignore",
    )


class RunConfig(BaseSettings):
    """A full run: problem, networks, training, data and evaluation.

    Loaded from JSON; any ``WLF_<SECTION>__<KEY>`` environment variable overrides
    the corresponding key of the file (e.g. ``WLF_TRAIN__ITERATIONS=200``).
    """

    problem: ProblemSpec = Field(default_factory=ProblemSpec)
    field: FieldSpec
    path: PathSpec
    train: TrainConfig = Field(default_factory=TrainConfig)
    dataset: DatasetRef
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    run_dir: str = "runs/default"

    model_config = SettingsConfigDict(
        env_prefix="WLF_",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # environment wins over the config file
        return env_settings, init_settings

    @model_validator(mode="after")
    def check_dimensions(self) -> "RunConfig":
        if self.field.input_dim != self.path.input_dim:
            raise ValueError(
                f"field.input_dim ({self.field.input_dim}) != path.input_dim ({self.path.input_dim})"
            )
        if self.dataset.source == "synthetic" and self.dataset.dim != self.field.input_dim:
            raise ValueError(
                f"dataset.dim ({self.dataset.dim}) != field.input_dim ({self.field.input_dim})"
            )
        return self


settings = Settings()
