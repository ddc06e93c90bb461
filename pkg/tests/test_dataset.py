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

from churnrnn.dataset import (
    build_learning_set,
    build_test_set,
    class_balance,
    eligible_learning_times,
    learning_set_sizes,
    read_sample_set,
    write_sample_set,
)
from churnrnn.errors import ConfigError, EmptySetError, InsufficientFutureError
from churnrnn.schema import ChurnParams, EligibilityParams, SampleKind

T = dt.date(2019, 12, 1)
T0 = dt.date(2019, 6, 1)
DAYS = 400
PARAMS = EligibilityParams(t0=T0)


def active_until(last: dt.date, start=dt.date(2019, 1, 1)):
    n = (last - start).days + 1
    return [True] * n + [False] * (DAYS - n)


def test_always_active_player_contributes_every_day(make_history, schema):
    history = make_history([True] * DAYS)
    ls = build_learning_set([history], T, PARAMS, schema=schema)
    expected = (T - dt.timedelta(days=30) - T0).days + 1
    assert len(ls) == expected
    assert ls.kind == SampleKind.LEARNING
    assert ls.samples[0].t_prime == T0
    assert ls.samples[-1].t_prime == dt.date(2019, 11, 1)
    assert ls.labels().sum() == 0
    assert all(len(s.trajectory) == 60 for s in ls.samples)


def test_recent_registration_defers_eligibility(make_history, schema):
    registration = dt.date(2019, 10, 1)
    pattern = [d >= (registration - dt.date(2019, 1, 1)).days for d in range(DAYS)]
    history = make_history(pattern, registration=registration)
    assert len(build_learning_set([history], T, PARAMS, schema=schema)) == 0

    registration = dt.date(2019, 8, 1)
    pattern = [d >= (registration - dt.date(2019, 1, 1)).days for d in range(DAYS)]
    early = make_history(pattern, registration=registration)
    times = eligible_learning_times(early, T, PARAMS, schema)
    assert times[0] == dt.date(2019, 9, 30)
    assert times[-1] == dt.date(2019, 11, 1)


def test_quitting_player_gets_churn_labels(make_history, schema):
    history = make_history(active_until(dt.date(2019, 7, 31)))
    ls = build_learning_set([history], T, PARAMS, schema=schema)
    assert len(ls) == 91
    assert ls.samples[0].t_prime == T0
    assert ls.samples[0].label == 0
    assert ls.samples[-1].t_prime == dt.date(2019, 8, 30)
    assert ls.samples[-1].label == 1
    assert ls.labels().sum() == 26
    first_churn = next(s for s in ls.samples if s.label == 1)
    assert first_churn.t_prime == dt.date(2019, 8, 5)


def test_learning_set_ignores_data_after_t(make_history, schema):
    rng = np.random.default_rng(5)
    pattern = rng.random(DAYS) < 0.1
    changed = pattern.copy()
    cut = (T - dt.date(2019, 1, 1)).days
    changed[cut + 1 :] = ~changed[cut + 1 :]
    a = build_learning_set([make_history(pattern)], T, PARAMS, schema=schema)
    b = build_learning_set([make_history(changed)], T, PARAMS, schema=schema)
    assert len(a) == len(b) > 0
    for x, y in zip(a.samples, b.samples):
        assert x.t_prime == y.t_prime
        assert x.label == y.label
        np.testing.assert_array_equal(x.trajectory.values, y.trajectory.values)


def test_samples_are_views_of_histories(make_history, schema):
    history = make_history([True] * DAYS)
    ls = build_learning_set([history], T, PARAMS, schema=schema)
    assert np.shares_memory(ls.samples[10].trajectory.values, history.values)


def test_test_set_membership(make_history, schema):
    histories = [
        make_history([True] * DAYS, player_id="active"),
        make_history(active_until(dt.date(2019, 10, 15)), player_id="gone"),
        make_history(
            [d >= 320 for d in range(DAYS)],
            player_id="new",
            registration=dt.date(2019, 11, 17),
        ),
        make_history(active_until(dt.date(2019, 11, 20)), player_id="leaving"),
    ]
    ts = build_test_set(histories, T, PARAMS, schema=schema)
    assert ts.kind == SampleKind.TEST
    assert [s.player_id for s in ts.samples] == ["active", "leaving"]
    assert [s.label for s in ts.samples] == [0, 1]
    assert all(s.t_prime == T for s in ts.samples)
    assert class_balance(ts) == 0.5


def test_test_set_needs_future_data(make_history, schema):
    history = make_history([True] * DAYS)
    late = history.date_at(DAYS - 10)
    with pytest.raises(InsufficientFutureError):
        build_test_set([history], late, PARAMS, schema=schema)


def test_horizon_mismatch_is_a_config_error(make_history, schema):
    with pytest.raises(ConfigError):
        build_learning_set(
            [make_history([True] * DAYS)],
            T,
            PARAMS,
            ChurnParams(t_pred=20),
            schema,
        )


def test_class_balance_of_empty_set(make_history, schema):
    ls = build_learning_set([make_history([False] * DAYS)], T, PARAMS, schema=schema)
    assert len(ls) == 0
    with pytest.raises(EmptySetError):
        class_balance(ls)


def test_learning_set_shrinks_as_t0_rises(make_history, schema):
    rng = np.random.default_rng(2)
    histories = [
        make_history(rng.random(DAYS) < rate, player_id=f"p{i}")
        for i, rate in enumerate([0.05, 0.2, 0.5, 0.9])
    ]
    t0_values = [dt.date(2019, m, 1) for m in (3, 5, 7, 9, 11)]
    sizes = learning_set_sizes(histories, T, PARAMS, t0_values, schema=schema)
    values = [sizes[t0] for t0 in t0_values]
    assert values == sorted(values, reverse=True)
    swept = PARAMS.model_copy(update={"t0": t0_values[0]})
    assert values[0] == len(build_learning_set(histories, T, swept, schema=schema))


def test_sample_file_round_trip(tmp_path, make_history, schema):
    history = make_history(active_until(dt.date(2019, 7, 31)))
    ls = build_learning_set([history], T, PARAMS, schema=schema)
    path = tmp_path / "ls.jsonl"
    write_sample_set(ls, path, schema, PARAMS, ChurnParams())
    loaded, header = read_sample_set(path)
    assert header.size == len(ls)
    assert header.eligibility == PARAMS
    assert loaded.kind == SampleKind.LEARNING
    assert loaded.as_of == T
    np.testing.assert_array_equal(loaded.labels(), ls.labels())
    np.testing.assert_array_equal(
        loaded.samples[-1].trajectory.values, ls.samples[-1].trajectory.values
    )


def test_truncated_sample_file_is_rejected(tmp_path, make_history, schema):
    ls = build_learning_set([make_history([True] * DAYS)], T, PARAMS, schema=schema)
    path = tmp_path / "ls.jsonl"
    write_sample_set(ls, path, schema, PARAMS, ChurnParams())
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ConfigError):
        read_sample_set(path)
