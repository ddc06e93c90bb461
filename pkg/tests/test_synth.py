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

import numpy as np
import pytest

from churnrnn.errors import CalibrationError, ConfigError
from churnrnn.labeling import churn_variable, churn_variables
from churnrnn.schema import (
    ChurnParams,
    PopulationConfig,
    ShockEvent,
    WeightedArchetype,
)
from churnrnn.synth import (
    ACTIVITY_FILE,
    REGISTRATIONS_FILE,
    SERIES_FILE,
    calibrate_prevalence,
    estimate_prevalence,
    generate_player,
    generate_population,
    write_population,
)
from churnrnn.timeseries import (
    active_mask,
    days_since_active,
    ingest_activity_log,
    read_activity_log,
    read_registrations,
    read_series,
)
from tests.conftest import REPO_ROOT, archetype, population

T = dt.date(2019, 9, 1)


def single(**overrides):
    return [WeightedArchetype(archetype=archetype(**overrides), weight=1.0)]


def test_generation_is_deterministic(small_population, schema):
    a = generate_population(small_population, schema)
    b = generate_population(small_population, schema, n_jobs=2)
    assert [h.player_id for h in a] == [f"p{i:06d}" for i in range(30)]
    for x, y in zip(a, b):
        assert x.registration_date == y.registration_date
        np.testing.assert_array_equal(x.values, y.values)
    other = generate_population(small_population.override(seed=8), schema)
    assert any(not np.array_equal(x.values, y.values) for x, y in zip(a, other))


def test_player_does_not_depend_on_population_size(small_population, schema):
    bigger = small_population.override(player_count=60)
    np.testing.assert_array_equal(
        generate_player(small_population, 5, schema).values,
        generate_player(bigger, 5, schema).values,
    )


def test_generated_histories_are_well_formed(schema):
    config = population(
        archetypes=single(idle_connection_rate=0.2),
        registration_start=dt.date(2018, 6, 1),
        registration_end=dt.date(2019, 6, 1),
    )
    plays, tickets = schema.index("casino_plays"), schema.index("sport_tickets")
    for history in generate_population(config, schema):
        assert history.n_days == 365
        assert (history.values[:, schema.count_indices] >= 0).all()
        np.testing.assert_array_equal(
            history.values[:, schema.recency_index],
            days_since_active(
                active_mask(history.values, schema),
                history.registration_index,
                history.days_since_active_at_start,
            ),
        )
        if history.registration_index > 0:
            assert not history.values[: history.registration_index].any()
        casino = history.values[:, schema.index("casino_ggr")] != 0
        sport = history.values[:, schema.index("sport_ggr")] != 0
        assert (history.values[casino, plays] > 0).all()
        assert (history.values[sport, tickets] > 0).all()


def test_players_who_never_quit_never_churn(schema):
    config = population(
        archetypes=single(daily_activity_rate=1.0, churn_hazard=0.0),
        registration_start=dt.date(2018, 10, 1),
        registration_end=dt.date(2018, 12, 31),
    )
    params = ChurnParams()
    for history in generate_population(config, schema):
        assert active_mask(history.values, schema).all()
        assert np.nansum(churn_variables(history, params, schema)) == 0


def test_certain_hazard_leaves_only_the_registration_day(schema):
    config = population(
        archetypes=single(churn_hazard=1.0, idle_connection_rate=0.5),
        registration_start=dt.date(2019, 2, 1),
        registration_end=dt.date(2019, 3, 1),
    )
    logged = [schema.index(n) for n in schema.logged_names]
    for history in generate_population(config, schema):
        assert not history.values[history.registration_index + 1 :, logged].any()


def test_full_shutdown_shock_churns_everyone(schema):
    shock = ShockEvent(
        start=dt.date(2019, 6, 1), end=dt.date(2019, 7, 15), activity_multiplier=0.0
    )
    config = population(
        archetypes=single(daily_activity_rate=1.0, churn_hazard=0.0),
        registration_start=dt.date(2018, 10, 1),
        registration_end=dt.date(2018, 12, 31),
        shocks=[shock],
    )
    params = ChurnParams()
    for history in generate_population(config, schema):
        before = history.index_of(dt.date(2019, 5, 31))
        end = history.index_of(dt.date(2019, 7, 15))
        assert churn_variable(history, before, params, schema) == 0
        assert churn_variable(history, end, params, schema) == 1
        after = history.index_of(dt.date(2019, 7, 16))
        assert active_mask(history.values[after], schema)


def test_idle_days_carry_a_connection(schema):
    config = population(
        archetypes=single(
            daily_activity_rate=0.3, churn_hazard=0.0, idle_connection_rate=1.0
        )
    )
    connections = schema.index("connections")
    for history in generate_population(config, schema):
        alive = np.arange(history.n_days) >= history.registration_index
        idle = alive & ~active_mask(history.values, schema)
        assert idle.any()
        assert (history.values[idle, connections] == 1).all()


def test_shock_on_unknown_feature_is_rejected(schema):
    shock = ShockEvent(
        start=dt.date(2019, 6, 1), end=dt.date(2019, 6, 2), multipliers={"poker": 0.5}
    )
    with pytest.raises(ConfigError):
        generate_population(population(shocks=[shock]), schema)


def test_written_population_reads_back(tmp_path, small_population, schema):
    histories = generate_population(small_population, schema)
    write_population(histories, tmp_path, schema)
    assert (tmp_path / ACTIVITY_FILE).exists()
    loaded = read_series(tmp_path / SERIES_FILE, tmp_path / REGISTRATIONS_FILE, schema)
    for a, b in zip(histories, loaded):
        assert a.player_id == b.player_id
        assert a.registration_date == b.registration_date
        np.testing.assert_array_equal(a.values, b.values)

    window = (small_population.start_date, small_population.end_date)
    ingested = ingest_activity_log(
        read_activity_log(tmp_path / ACTIVITY_FILE),
        read_registrations(tmp_path / REGISTRATIONS_FILE),
        schema,
        window,
    )
    for a, b in zip(histories, ingested):
        np.testing.assert_array_equal(a.values, b.values)


def steady_population(**overrides):
    return population(
        archetypes=single(churn_hazard=0.002, **overrides), player_count=200
    )


def test_calibration_keeps_config_already_on_target(schema, eligibility):
    config = steady_population()
    prevalence = estimate_prevalence(config, T, eligibility, schema=schema)
    calibrated = calibrate_prevalence(
        config, prevalence, T, eligibility, schema=schema, sample_size=200
    )
    assert calibrated is config


def test_calibration_can_remove_churn(schema, eligibility):
    config = steady_population(daily_activity_rate=0.9)
    calibrated = calibrate_prevalence(
        config, 0.0, T, eligibility, schema=schema, sample_size=200
    )
    assert calibrated.player_count == 200
    prevalence = estimate_prevalence(calibrated, T, eligibility, schema=schema)
    assert prevalence <= 0.02


def test_calibration_fails_outside_bounds(schema, eligibility):
    with pytest.raises(CalibrationError):
        calibrate_prevalence(
            steady_population(),
            0.9,
            T,
            eligibility,
            schema=schema,
            bounds=(0.0, 0.5),
            sample_size=200,
        )
    with pytest.raises(ConfigError):
        calibrate_prevalence(steady_population(), 1.0, T, eligibility)


def test_shipped_shock_population_closes_the_casino(schema):
    config = PopulationConfig.from_yaml(
        REPO_ROOT / "configs" / "population_shock.yaml"
    ).override(player_count=60)
    histories = generate_population(config, schema)
    outage = slice(
        (dt.date(2020, 6, 26) - config.start_date).days,
        (dt.date(2020, 6, 30) - config.start_date).days + 1,
    )
    casino = [schema.index("casino_plays"), schema.index("casino_ggr")]
    before = slice(outage.start - 30, outage.start)
    assert any(h.values[before, casino[0]].any() for h in histories)
    for history in histories:
        assert not history.values[outage][:, casino].any()
