# Copyright 2024 DataRobot, Inc.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from __future__ import annotations

import datetime as dt
import hashlib
from contextvars import ContextVar
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    YamlConfigSettingsSource,
)

from churnrnn.errors import ConfigError
from churnrnn.schema import (
    Architecture,
    CellKind,
    ChurnParams,
    EligibilityParams,
    ExperimentKind,
    FeatureSchema,
    PopulationConfig,
    TrainerConfig,
)

ENV_PREFIX = "CHURNRNN_"

_config_file: ContextVar[Optional[Path]] = ContextVar("_config_file", default=None)

_SOURCES = ("population", "population_file", "series", "activity")
_STORED_FILES = ("series", "activity", "registrations")


class RuntimeSettings(BaseSettings):
    """Process-level knobs, overridable by environment variables."""

    log_level: str = Field(default="INFO", description="Root logger level")
    n_jobs: int = Field(default=1, description="joblib workers for independent runs")

    model_config = SettingsConfigDict(env_prefix=ENV_PREFIX, extra="ignore")


class DataSource(BaseModel):
    """Where the player histories come from.

    Exactly one of: a generator config (inline or as a file), a dense series
    file, or a raw activity log. Stored data needs a registrations file.
    Relative paths are taken from the directory of the config file being
    loaded, or from the working directory when there is none.
    """

    population: Optional[PopulationConfig] = None
    population_file: Optional[Path] = None
    series: Optional[Path] = None
    activity: Optional[Path] = None
    registrations: Optional[Path] = None
    log_start: Optional[dt.date] = Field(
        default=None,
        description="First day the activity log covers, defaults to its first row",
    )

    @field_validator("population_file", "series", "activity", "registrations")
    @classmethod
    def resolve_path(cls, path: Optional[Path]) -> Optional[Path]:
        if path is None:
            return None
        config_file = _config_file.get()
        if not path.is_absolute() and config_file is not None:
            path = config_file.parent / path
        if not path.is_file():
            raise ValueError(f"Data file not found: {path}")
        return path

    @model_validator(mode="after")
    def check_source(self) -> DataSource:
        given = [name for name in _SOURCES if getattr(self, name) is not None]
        if len(given) != 1:
            raise ValueError(
                f"Data source needs exactly one of {', '.join(_SOURCES)}, "
                f"got {given or 'none'}"
            )
        stored = self.series is not None or self.activity is not None
        if stored and self.registrations is None:
            raise ValueError("Stored data needs a registrations file")
        if not stored and self.registrations is not None:
            raise ValueError("registrations only go with series or activity")
        if self.log_start is not None and self.activity is None:
            raise ValueError("log_start only applies to an activity log")
        return self

    def population_config(self) -> Optional[PopulationConfig]:
        if self.population_file is not None:
            return PopulationConfig.from_yaml(self.population_file)
        return self.population

    def files(self) -> Dict[str, Path]:
        """Stored data files by field name."""
        paths = {name: getattr(self, name) for name in _STORED_FILES}
        return {name: path for name, path in paths.items() if path is not None}

    def checksums(self) -> Dict[str, str]:
        """sha256 of every stored data file, by field name."""
        return {
            name: hashlib.sha256(path.read_bytes()).hexdigest()
            for name, path in self.files().items()
        }

    def resolved(self) -> DataSource:
        """Copy with the generator config inlined and file paths made absolute."""
        if self.population_file is not None:
            return DataSource(population=self.population_config())
        return self.model_copy(
            update={name: path.resolve() for name, path in self.files().items()}
        )


class ExperimentConfig(BaseSettings):
    """Fully resolved description of one experiment.

    Precedence: keyword overrides (CLI flags) > `CHURNRNN_*` environment
    variables > YAML config file > defaults.
    """

    kind: ExperimentKind = ExperimentKind.STANDARD
    data: DataSource
    feature_schema: FeatureSchema = Field(default_factory=FeatureSchema.canonical)
    cells: List[CellKind] = Field(
        default=[CellKind.GRU, CellKind.LSTM, CellKind.NBRC], min_length=1
    )
    architecture: Architecture = Architecture()
    trainer: TrainerConfig = TrainerConfig()
    eligibility: EligibilityParams
    churn: ChurnParams = ChurnParams()
    t: dt.date = Field(description="Reference date of the learning and test sets")
    seeds: List[int] = Field(default=[0, 1, 2], min_length=1)
    t0_values: List[dt.date] = []
    t_prime_values: List[dt.date] = []
    threshold: float = Field(default=0.5, gt=0, lt=1)
    output_dir: Path = Path("runs")
    save_models: bool = True

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX, env_nested_delimiter="__", extra="ignore"
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        config_file = _config_file.get()
        if config_file is None:
            return (init_settings, env_settings)
        return (
            init_settings,
            env_settings,
            YamlConfigSettingsSource(settings_cls, yaml_file=config_file),
        )

    @classmethod
    def load(
        cls, config_file: Optional[str | Path] = None, **overrides: Any
    ) -> ExperimentConfig:
        path = Path(config_file) if config_file else None
        if path is not None and not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        token = _config_file.set(path)
        try:
            return cls(**overrides)
        finally:
            _config_file.reset(token)

    @model_validator(mode="after")
    def check_experiment(self) -> ExperimentConfig:
        if self.eligibility.t_pred != self.churn.t_pred:
            raise ValueError(
                f"eligibility.t_pred={self.eligibility.t_pred} must equal "
                f"churn.t_pred={self.churn.t_pred}"
            )
        if self.architecture.input_dim != self.feature_schema.n:
            raise ValueError(
                f"architecture.input_dim={self.architecture.input_dim} does not "
                f"match the {self.feature_schema.n} schema features"
            )
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"Duplicate seeds: {self.seeds}")
        if self.kind == ExperimentKind.SWEEP_T0:
            if not self.t0_values:
                raise ValueError("sweep_t0 needs t0_values")
            if self.t0_values != sorted(self.t0_values):
                raise ValueError("t0_values must be ascending")
            last = self.t - dt.timedelta(days=self.eligibility.t_pred)
            if self.t0_values[-1] > last:
                raise ValueError(f"t0_values must not exceed t - T_pred = {last}")
        if self.kind == ExperimentKind.TIME_ROBUSTNESS:
            if not self.t_prime_values:
                raise ValueError("time_robustness needs t_prime_values")
            if min(self.t_prime_values) < self.t:
                raise ValueError(f"t_prime_values must not precede t = {self.t}")
        return self

    def architecture_for(self, cell: CellKind) -> Architecture:
        return self.architecture.model_copy(update={"cell_kind": cell})

    def trainer_for(self, seed: int) -> TrainerConfig:
        return self.trainer.model_copy(update={"seed": seed})

    def resolved(self) -> ExperimentConfig:
        """Copy that no longer depends on the config file or its population file."""
        return self.model_copy(
            update={
                "data": self.data.resolved(),
                "output_dir": self.output_dir.resolve(),
            }
        )
