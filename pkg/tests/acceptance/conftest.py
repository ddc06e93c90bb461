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

import logging
from pathlib import Path

import pytest

from churnrnn.schema import PopulationConfig
from churnrnn.settings import ExperimentConfig

logger = logging.getLogger(__name__)

CONFIGS = Path(__file__).resolve().parents[2] / "configs"
LEARNING_SIGNAL_PLAYERS = 2000


def acceptance_config(name: str, out_dir: Path, **overrides) -> ExperimentConfig:
    """configs/acceptance/<name>.yaml with its population given inline."""
    path = CONFIGS / "acceptance" / f"{name}.yaml"
    config = ExperimentConfig.load(path)
    population = overrides.pop("population", None)
    if population is None:
        population = config.data.population_config()
    # YAML and overrides are deep-merged, so the file source must be cleared.
    data = {"population": population, "population_file": None}
    return ExperimentConfig.load(path, data=data, output_dir=out_dir, **overrides)


@pytest.fixture(scope="session")
def default_population() -> PopulationConfig:
    return PopulationConfig.from_yaml(CONFIGS / "population_default.yaml")


@pytest.fixture(scope="session")
def learning_population(default_population) -> PopulationConfig:
    return default_population.override(player_count=LEARNING_SIGNAL_PLAYERS)
