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
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from churnrnn.errors import SchemaError

PLAYER_ID_COLUMN: str = "player_id"
DATE_COLUMN: str = "date"
FEATURE_COLUMN: str = "feature"
VALUE_COLUMN: str = "value"
REGISTRATION_COLUMN: str = "registration_date"
DAYS_SINCE_ACTIVE_AT_START_COLUMN: str = "days_since_active_at_start"

_M = TypeVar("_M", bound="YamlModel")


class YamlModel(BaseModel):
    """Pydantic model that round-trips through a human-editable YAML file."""

    @classmethod
    def from_yaml(cls: Type[_M], path: str | Path) -> _M:
        with open(path) as f:
            return cls.model_validate(yaml.safe_load(f) or {})

    def to_yaml(self, path: str | Path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.model_dump(mode="json"), f, sort_keys=False)


class FeatureKind(str, Enum):
    COUNT = "count"
    CURRENCY = "currency"
    RECENCY = "recency"


class FeatureSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    kind: FeatureKind
    churn_defining: bool = False


class FeatureSchema(YamlModel):
    """Ordered daily feature vector layout.

    Row order is the column order of every series file and every network input.
    """

    model_config = ConfigDict(frozen=True)

    features: Tuple[FeatureSpec, ...]

    @model_validator(mode="after")
    def check_layout(self) -> FeatureSchema:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate feature names in schema: {names}")
        if not 1 <= self.n_c < self.n:
            raise ValueError(
                f"Schema needs 1 <= n_c < n, got n_c={self.n_c}, n={self.n}"
            )
        recency = [f for f in self.features if f.kind == FeatureKind.RECENCY]
        if len(recency) > 1:
            raise ValueError("At most one recency feature is supported")
        if any(
            f.churn_defining and f.kind != FeatureKind.COUNT for f in self.features
        ):
            raise ValueError("Churn-defining features must be counts")
        return self

    @classmethod
    def canonical(cls) -> FeatureSchema:
        return cls(
            features=(
                FeatureSpec(
                    name="casino_plays", kind=FeatureKind.COUNT, churn_defining=True
                ),
                FeatureSpec(name="casino_ggr", kind=FeatureKind.CURRENCY),
                FeatureSpec(
                    name="sport_tickets", kind=FeatureKind.COUNT, churn_defining=True
                ),
                FeatureSpec(name="sport_ggr", kind=FeatureKind.CURRENCY),
                FeatureSpec(
                    name="deposits", kind=FeatureKind.COUNT, churn_defining=True
                ),
                FeatureSpec(name="withdrawals", kind=FeatureKind.COUNT),
                FeatureSpec(name="connections", kind=FeatureKind.COUNT),
                FeatureSpec(name="days_since_active", kind=FeatureKind.RECENCY),
            )
        )

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def n_c(self) -> int:
        return len(self.churn_indices)

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def churn_indices(self) -> List[int]:
        return [i for i, f in enumerate(self.features) if f.churn_defining]

    @property
    def count_indices(self) -> List[int]:
        return [
            i
            for i, f in enumerate(self.features)
            if f.kind in (FeatureKind.COUNT, FeatureKind.RECENCY)
        ]

    @property
    def recency_index(self) -> Optional[int]:
        for i, f in enumerate(self.features):
            if f.kind == FeatureKind.RECENCY:
                return i
        return None

    @property
    def logged_names(self) -> List[str]:
        """Features that come from raw logs, i.e. everything but recency."""
        return [f.name for f in self.features if f.kind != FeatureKind.RECENCY]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"Unknown feature name: {name!r}") from None


class ChurnParams(BaseModel):
    """Churn definition: t_c inactive days make a churn, horizon of t_pred days."""

    model_config = ConfigDict(frozen=True)

    t_c: int = Field(default=35, ge=1)
    t_pred: int = Field(default=30, ge=1)


class EligibilityParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    t0: dt.date = Field(description="Global lower bound on t'")
    t0_offset: int = Field(
        default=60, ge=0, description="Per-player lower bound, days after registration"
    )
    t_pred: int = Field(default=30, ge=1)
    t_h: int = Field(default=60, ge=1, description="Trajectory length cap in days")
    recent_activity_window: int = Field(default=30, ge=1)
    min_active_days: int = Field(default=1, ge=0)


class CellKind(str, Enum):
    GRU = "GRU"
    LSTM = "LSTM"
    NBRC = "nBRC"


class Architecture(BaseModel):
    """Two recurrent layers of widths n and m, then one sigmoid unit."""

    model_config = ConfigDict(frozen=True)

    cell_kind: CellKind = CellKind.LSTM
    n: int = Field(default=128, ge=1, description="First recurrent layer width")
    m: int = Field(default=64, ge=1, description="Second recurrent layer width")
    input_dim: int = Field(default=8, ge=1)


class TrainerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=1e-3, gt=0, description="RMSprop learning rate")
    decay: float = Field(
        default=0.9,
        gt=0,
        lt=1,
        description="Decay factor of the squared-gradient average (rho, a.k.a. gamma)",
    )
    batch_size: int = Field(default=256, ge=1)
    n_epochs: int = Field(default=20, ge=0)
    seed: int = 0
    epsilon: float = Field(default=1e-8, gt=0)
    prob_clamp: float = Field(default=1e-12, gt=0, lt=0.5)
    standardize: bool = True
    track_empirical_loss: bool = False


class SampleKind(str, Enum):
    LEARNING = "learning"
    TEST = "test"


class ExperimentKind(str, Enum):
    STANDARD = "standard"
    SWEEP_T0 = "sweep_t0"
    TIME_ROBUSTNESS = "time_robustness"


WEEKDAYS: int = 7


class ArchetypeSpec(BaseModel):
    """Behaviour profile a synthetic player is drawn from."""

    name: str
    daily_activity_rate: float = Field(ge=0, le=1)
    mean_plays: float = Field(ge=0)
    mean_tickets: float = Field(ge=0)
    mean_deposits: float = Field(ge=0)
    mean_withdrawals: float = Field(ge=0)
    mean_connections: float = Field(ge=0)
    ggr_mean: float
    ggr_std: float = Field(ge=0)
    churn_hazard: float = Field(ge=0, le=1)
    idle_connection_rate: float = Field(default=0.0, ge=0, le=1)
    weekly_profile: Tuple[float, ...] = (1.0,) * WEEKDAYS

    @model_validator(mode="after")
    def check_weekly_profile(self) -> ArchetypeSpec:
        if len(self.weekly_profile) != WEEKDAYS:
            raise ValueError(f"weekly_profile needs {WEEKDAYS} multipliers")
        if any(w < 0 for w in self.weekly_profile):
            raise ValueError("weekly_profile multipliers must be >= 0")
        mean = sum(self.weekly_profile) / WEEKDAYS
        if abs(mean - 1.0) > 1e-9:
            raise ValueError(f"weekly_profile must average to 1, got {mean}")
        return self


class WeightedArchetype(BaseModel):
    archetype: ArchetypeSpec
    weight: float = Field(ge=0)


class ShockEvent(BaseModel):
    """Population-wide change of behaviour over [start, end] inclusive."""

    start: dt.date
    end: dt.date
    multipliers: Dict[str, float] = {}
    activity_multiplier: float = Field(default=1.0, ge=0)

    @model_validator(mode="after")
    def check_range(self) -> ShockEvent:
        if self.end < self.start:
            raise ValueError(f"Shock ends before it starts: {self.start} > {self.end}")
        if any(v < 0 for v in self.multipliers.values()):
            raise ValueError("Shock multipliers must be >= 0")
        return self


class PopulationConfig(YamlModel):
    archetypes: List[WeightedArchetype]
    player_count: int = Field(ge=1)
    start_date: dt.date
    end_date: dt.date
    registration_start: dt.date
    registration_end: dt.date
    shocks: List[ShockEvent] = []
    seed: int = 0

    @model_validator(mode="after")
    def check_population(self) -> PopulationConfig:
        if not self.archetypes:
            raise ValueError("At least one archetype is required")
        total = sum(a.weight for a in self.archetypes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Archetype weights must sum to 1, got {total}")
        if self.end_date < self.start_date:
            raise ValueError("end_date precedes start_date")
        if self.registration_end < self.registration_start:
            raise ValueError("registration_end precedes registration_start")
        if self.registration_end > self.end_date:
            raise ValueError("Players cannot register after the calendar ends")
        return self

    def with_hazard_scale(self, factor: float) -> PopulationConfig:
        """Copy with every archetype's churn hazard multiplied by `factor`."""
        archetypes = [
            WeightedArchetype(
                archetype=a.archetype.model_copy(
                    update={"churn_hazard": min(1.0, a.archetype.churn_hazard * factor)}
                ),
                weight=a.weight,
            )
            for a in self.archetypes
        ]
        return self.model_copy(update={"archetypes": archetypes})

    def override(self, **values: Any) -> PopulationConfig:
        return type(self).model_validate(
            {**self.model_dump(), **{k: v for k, v in values.items() if v is not None}}
        )
