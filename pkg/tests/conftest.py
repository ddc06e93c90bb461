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

# mypy: ignore-errors

import datetime as dt
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pytest

from churnrnn.dataset import LabeledSample, SampleSet
from churnrnn.schema import (
    ArchetypeSpec,
    EligibilityParams,
    FeatureSchema,
    PopulationConfig,
    SampleKind,
    WeightedArchetype,
)
from churnrnn.timeseries import (
    PlayerHistory,
    Trajectory,
    recompute_days_since_active,
)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent
START = dt.date(2019, 1, 1)


@pytest.fixture(scope="session")
def schema() -> FeatureSchema:
    return FeatureSchema.canonical()


@pytest.fixture(scope="session")
def make_history(schema) -> Callable[..., PlayerHistory]:
    """History whose active days carry one casino play, from a boolean pattern."""

    def build(
        active: Sequence[bool],
        player_id: str = "p0",
        registration: Optional[dt.date] = None,
        start: dt.date = START,
        seed: int = 0,
    ) -> PlayerHistory:
        active = np.asarray(active, dtype=bool)
        values = np.zeros((len(active), schema.n))
        values[active, schema.index("casino_plays")] = 1.0
        values[active, schema.index("casino_ggr")] = 2.5
        return recompute_days_since_active(
            PlayerHistory(
                player_id=player_id,
                registration_date=registration or start,
                start_date=start,
                values=values,
                days_since_active_at_start=seed,
            ),
            schema,
        )

    return build


def archetype(**overrides) -> ArchetypeSpec:
    values = dict(
        name="test",
        daily_activity_rate=0.5,
        mean_plays=3.0,
        mean_tickets=1.0,
        mean_deposits=0.5,
        mean_withdrawals=0.1,
        mean_connections=1.0,
        ggr_mean=5.0,
        ggr_std=10.0,
        churn_hazard=0.01,
    )
    values.update(overrides)
    return ArchetypeSpec(**values)


def population(archetypes=None, **overrides) -> PopulationConfig:
    values = dict(
        archetypes=archetypes
        or [WeightedArchetype(archetype=archetype(), weight=1.0)],
        player_count=30,
        start_date=dt.date(2019, 1, 1),
        end_date=dt.date(2019, 12, 31),
        registration_start=dt.date(2018, 10, 1),
        registration_end=dt.date(2019, 3, 1),
        seed=7,
    )
    values.update(overrides)
    return PopulationConfig(**values)


@pytest.fixture
def small_population() -> PopulationConfig:
    return population()


@pytest.fixture
def eligibility() -> EligibilityParams:
    return EligibilityParams(t0=dt.date(2019, 7, 15))


def sample_set(trajectories, labels, kind=SampleKind.LEARNING) -> SampleSet:
    """Sample set over raw arrays, each ending on START."""
    return SampleSet(
        [
            LabeledSample(
                trajectory=Trajectory(np.asarray(values, dtype=np.float64), START),
                label=int(label),
                player_id=f"p{i:03d}",
                t_prime=START,
            )
            for i, (values, label) in enumerate(zip(trajectories, labels))
        ],
        kind,
        START,
    )
