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

"""Daily activity series: ingestion from raw logs, dense export, slicing."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from churnrnn.errors import DateRangeError, SchemaError
from churnrnn.files import read_csv, write_csv
from churnrnn.schema import (
    DATE_COLUMN,
    DAYS_SINCE_ACTIVE_AT_START_COLUMN,
    FEATURE_COLUMN,
    PLAYER_ID_COLUMN,
    REGISTRATION_COLUMN,
    VALUE_COLUMN,
    FeatureSchema,
)

logger = logging.getLogger(__name__)

Window = Tuple[dt.date, dt.date]


@dataclass
class PlayerHistory:
    """Dense daily series of one player, one row per calendar day."""

    player_id: str
    registration_date: dt.date
    start_date: dt.date
    values: np.ndarray
    days_since_active_at_start: int = 0

    @property
    def n_days(self) -> int:
        return int(self.values.shape[0])

    @property
    def end_date(self) -> dt.date:
        return self.date_at(self.n_days - 1)

    @property
    def registration_index(self) -> int:
        """Day index of registration; negative when it precedes the series."""
        return (self.registration_date - self.start_date).days

    def date_at(self, index: int) -> dt.date:
        return self.start_date + dt.timedelta(days=index)

    def index_of(self, date: dt.date) -> int:
        index = (date - self.start_date).days
        if not 0 <= index < self.n_days:
            raise DateRangeError(
                f"{date} is outside the history of player {self.player_id} "
                f"({self.start_date} .. {self.end_date})"
            )
        return index

    def until(self, date: dt.date) -> PlayerHistory:
        """View of the history truncated to days <= date."""
        return replace(self, values=self.values[: self.index_of(date) + 1])


@dataclass
class Trajectory:
    """The last <= T_h days of a history, ending at `end_date` inclusive."""

    values: np.ndarray
    end_date: dt.date

    def __len__(self) -> int:
        return int(self.values.shape[0])


def active_mask(values: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Per day: at least one churn-defining feature is nonzero."""
    return np.asarray(np.any(values[..., schema.churn_indices] != 0, axis=-1))


def days_since_active(
    active: np.ndarray, registration_index: int, seed: int = 0
) -> np.ndarray:
    """Days elapsed since the most recent active day, per day.

    Counting starts at registration. Days before it are 0. For players
    registered before the series starts, `seed` is the value the day before
    index 0 would have had.
    """
    n_days = active.shape[0]
    out = np.zeros(n_days, dtype=np.float64)
    start = max(registration_index, 0)
    if start >= n_days:
        return out
    offset = seed if registration_index <= 0 else 0
    idx = np.arange(n_days)
    last = np.where(active & (idx >= start), idx, -1)
    last = np.maximum.accumulate(last)
    tail = idx[start:]
    since = np.where(last[start:] >= 0, tail - last[start:], tail - start + 1 + offset)
    out[start:] = since
    return out


def recompute_days_since_active(
    history: PlayerHistory, schema: FeatureSchema
) -> PlayerHistory:
    """Refill the recency column in place from the churn-defining features."""
    if schema.recency_index is not None:
        history.values[:, schema.recency_index] = days_since_active(
            active_mask(history.values, schema),
            history.registration_index,
            history.days_since_active_at_start,
        )
    return history


def _check_days_since_active(history: PlayerHistory, schema: FeatureSchema) -> None:
    column = schema.recency_index
    if column is None:
        return
    expected = days_since_active(
        active_mask(history.values, schema),
        history.registration_index,
        history.days_since_active_at_start,
    )
    mismatch = np.flatnonzero(history.values[:, column] != expected)
    if mismatch.size:
        day = history.date_at(int(mismatch[0]))
        raise SchemaError(
            f"Player {history.player_id}: {schema.names[column]} on {day} is "
            f"{history.values[mismatch[0], column]}, expected {expected[mismatch[0]]}"
        )


def _window_days(window: Window) -> int:
    start, end = window
    if end < start:
        raise DateRangeError(f"Window end {end} precedes start {start}")
    return (end - start).days + 1


def _to_dates(column: pd.Series) -> pd.Series:
    return pd.to_datetime(column).dt.date


def ingest_player(
    player_id: str,
    rows: pd.DataFrame,
    registration_date: dt.date,
    schema: FeatureSchema,
    window: Window,
    days_since_active_at_start: int = 0,
) -> PlayerHistory:
    """Dense history of one player from their (already validated) log rows.

    `rows` holds integer `day` and `column` indices and a float `value`.
    Duplicate cells are summed.
    """
    start, _ = window
    values = np.zeros((_window_days(window), schema.n), dtype=np.float64)
    if len(rows):
        np.add.at(
            values,
            (rows["day"].to_numpy(), rows["column"].to_numpy()),
            rows[VALUE_COLUMN].to_numpy(dtype=np.float64),
        )
    history = PlayerHistory(
        player_id=player_id,
        registration_date=registration_date,
        start_date=start,
        values=values,
        days_since_active_at_start=days_since_active_at_start,
    )
    early = history.registration_index
    if early > 0 and np.any(values[: min(early, history.n_days)] != 0):
        raise SchemaError(f"Player {player_id} has activity before registration")
    return recompute_days_since_active(history, schema)


def _registration_lookup(
    registrations: pd.DataFrame,
) -> Dict[str, Tuple[dt.date, int]]:
    missing = {PLAYER_ID_COLUMN, REGISTRATION_COLUMN} - set(registrations.columns)
    if missing:
        raise SchemaError(f"Registration records lack columns {sorted(missing)}")
    if registrations[PLAYER_ID_COLUMN].duplicated().any():
        raise SchemaError("Duplicate player ids in registration records")
    seeds = (
        registrations[DAYS_SINCE_ACTIVE_AT_START_COLUMN].fillna(0).astype(int)
        if DAYS_SINCE_ACTIVE_AT_START_COLUMN in registrations.columns
        else pd.Series(0, index=registrations.index)
    )
    return {
        str(p): (d, int(s))
        for p, d, s in zip(
            registrations[PLAYER_ID_COLUMN],
            _to_dates(registrations[REGISTRATION_COLUMN]),
            seeds,
        )
    }


def ingest_activity_log(
    rows: pd.DataFrame,
    registrations: pd.DataFrame,
    schema: FeatureSchema,
    window: Window,
    n_jobs: int = 1,
) -> List[PlayerHistory]:
    """Aggregate raw `player_id,date,feature,value` rows into dense histories.

    Every registered player gets a history covering the full window, sorted
    by player id. Absent days are zero vectors.
    """
    missing = {PLAYER_ID_COLUMN, DATE_COLUMN, FEATURE_COLUMN, VALUE_COLUMN} - set(
        rows.columns
    )
    if missing:
        raise SchemaError(f"Activity log lacks columns {sorted(missing)}")
    lookup = _registration_lookup(registrations)
    start, end = window
    n_days = _window_days(window)

    frame = rows[[PLAYER_ID_COLUMN, DATE_COLUMN, FEATURE_COLUMN, VALUE_COLUMN]].copy()
    frame[PLAYER_ID_COLUMN] = frame[PLAYER_ID_COLUMN].astype(str)
    frame[VALUE_COLUMN] = frame[VALUE_COLUMN].astype(np.float64)

    unknown = sorted(set(frame[FEATURE_COLUMN]) - set(schema.names))
    if unknown:
        raise SchemaError(f"Unknown feature names in activity log: {unknown}")
    derived = sorted(set(frame[FEATURE_COLUMN]) - set(schema.logged_names))
    if derived:
        raise SchemaError(f"Derived features cannot be ingested: {derived}")
    if not np.isfinite(frame[VALUE_COLUMN]).all():
        raise SchemaError("Activity log contains non-finite values")
    frame["column"] = [schema.index(name) for name in frame[FEATURE_COLUMN]]
    counts = frame["column"].isin(schema.count_indices)
    if (counts & (frame[VALUE_COLUMN] < 0)).any():
        raise SchemaError("Count features must be non-negative")

    frame["day"] = [(d - start).days for d in _to_dates(frame[DATE_COLUMN])]
    outside = (frame["day"] < 0) | (frame["day"] >= n_days)
    if outside.any():
        raise DateRangeError(
            f"{int(outside.sum())} activity rows fall outside {start} .. {end}"
        )
    unregistered = sorted(set(frame[PLAYER_ID_COLUMN]) - set(lookup))
    if unregistered:
        raise SchemaError(f"No registration record for players {unregistered[:5]}")
    duplicates = frame.duplicated(
        [PLAYER_ID_COLUMN, "day", "column"], keep=False
    ).sum()
    if duplicates:
        logger.info(f"Summing {duplicates} rows that share (player, date, feature)")

    groups = dict(tuple(frame.groupby(PLAYER_ID_COLUMN, sort=False)))
    empty = frame.iloc[0:0]
    player_ids = sorted(lookup)
    histories: List[PlayerHistory] = Parallel(n_jobs=n_jobs)(
        delayed(ingest_player)(
            player_id,
            groups.get(player_id, empty),
            lookup[player_id][0],
            schema,
            window,
            lookup[player_id][1],
        )
        for player_id in player_ids
    )
    logger.info(
        f"Ingested {len(frame)} rows into {len(histories)} histories of {n_days} days"
    )
    return histories


def export_activity_log(
    histories: Sequence[PlayerHistory], schema: FeatureSchema
) -> pd.DataFrame:
    """Long-format nonzero cells of the logged features; inverse of ingestion."""
    columns = [schema.index(name) for name in schema.logged_names]
    records = []
    for history in histories:
        days, cols = np.nonzero(history.values[:, columns])
        for day, col in zip(days, cols):
            records.append(
                {
                    PLAYER_ID_COLUMN: history.player_id,
                    DATE_COLUMN: history.date_at(int(day)).isoformat(),
                    FEATURE_COLUMN: schema.names[columns[col]],
                    VALUE_COLUMN: float(history.values[day, columns[col]]),
                }
            )
    return pd.DataFrame(
        records, columns=[PLAYER_ID_COLUMN, DATE_COLUMN, FEATURE_COLUMN, VALUE_COLUMN]
    )


def registrations_frame(histories: Sequence[PlayerHistory]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            PLAYER_ID_COLUMN: [h.player_id for h in histories],
            REGISTRATION_COLUMN: [h.registration_date.isoformat() for h in histories],
            DAYS_SINCE_ACTIVE_AT_START_COLUMN: [
                h.days_since_active_at_start for h in histories
            ],
        }
    )


def series_frame(
    histories: Sequence[PlayerHistory], schema: FeatureSchema
) -> pd.DataFrame:
    """Wide `player_id,date,<features>` table, one row per player-day."""
    frames = []
    for history in histories:
        frame = pd.DataFrame(history.values, columns=schema.names)
        frame.insert(0, DATE_COLUMN, [d.isoformat() for d in _dates(history)])
        frame.insert(0, PLAYER_ID_COLUMN, history.player_id)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=[PLAYER_ID_COLUMN, DATE_COLUMN, *schema.names])
    return pd.concat(frames, ignore_index=True)


def _dates(history: PlayerHistory) -> List[dt.date]:
    return [history.date_at(i) for i in range(history.n_days)]


def write_series(
    histories: Sequence[PlayerHistory],
    schema: FeatureSchema,
    series_path: str | Path,
    registrations_path: Optional[str | Path] = None,
) -> None:
    write_csv(series_frame(histories, schema), series_path)
    if registrations_path is not None:
        write_csv(registrations_frame(histories), registrations_path)


def read_activity_log(path: str | Path) -> pd.DataFrame:
    return read_csv(path, dtype={PLAYER_ID_COLUMN: str, FEATURE_COLUMN: str})


def read_registrations(path: str | Path) -> pd.DataFrame:
    return read_csv(path, dtype={PLAYER_ID_COLUMN: str})


def ingest_activity_file(
    activity_path: str | Path,
    registrations_path: str | Path,
    schema: FeatureSchema,
    end: dt.date,
    log_start: Optional[dt.date] = None,
    n_jobs: int = 1,
) -> List[PlayerHistory]:
    """Histories from an activity log file over [log_start, end].

    `log_start` is the day the log begins, which `days_since_active_at_start`
    in the registrations refers to. It defaults to the earliest logged date.
    Rows after `end` are dropped.
    """
    rows = read_activity_log(activity_path)
    if DATE_COLUMN not in rows.columns:
        raise SchemaError(f"Activity log {activity_path} lacks a {DATE_COLUMN} column")
    dates = _to_dates(rows[DATE_COLUMN])
    late = dates > end
    if late.any():
        logger.info(f"Dropping {int(late.sum())} activity rows after {end}")
        rows, dates = rows[~late], dates[~late]
    if log_start is None:
        if not len(rows):
            raise SchemaError(f"Activity log {activity_path} has no rows up to {end}")
        log_start = min(dates)
    return ingest_activity_log(
        rows, read_registrations(registrations_path), schema, (log_start, end), n_jobs
    )


def read_series(
    series_path: str | Path,
    registrations_path: str | Path,
    schema: FeatureSchema,
) -> List[PlayerHistory]:
    """Load a dense series file, checking density and the recency feature."""
    frame = read_csv(series_path, dtype={PLAYER_ID_COLUMN: str})
    missing = set(schema.names) - set(frame.columns)
    if missing:
        raise SchemaError(f"Series file lacks feature columns {sorted(missing)}")
    lookup = _registration_lookup(read_registrations(registrations_path))
    frame[DATE_COLUMN] = _to_dates(frame[DATE_COLUMN])

    histories: List[PlayerHistory] = []
    span: Optional[Tuple[dt.date, int]] = None
    for player_id, group in frame.groupby(PLAYER_ID_COLUMN, sort=True):
        dates = list(group[DATE_COLUMN])
        start = dates[0]
        expected = [start + dt.timedelta(days=i) for i in range(len(dates))]
        if dates != expected:
            raise SchemaError(f"Series of player {player_id} is not dense and ordered")
        if span is None:
            span = (start, len(dates))
        elif span != (start, len(dates)):
            raise SchemaError(f"Series of player {player_id} spans different dates")
        if player_id not in lookup:
            raise SchemaError(f"No registration record for player {player_id}")
        registration, seed = lookup[str(player_id)]
        history = PlayerHistory(
            player_id=str(player_id),
            registration_date=registration,
            start_date=start,
            values=group[schema.names].to_numpy(dtype=np.float64),
            days_since_active_at_start=seed,
        )
        _check_days_since_active(history, schema)
        histories.append(history)
    return histories


def slice_trajectory(history: PlayerHistory, t: dt.date, t_h: int) -> Trajectory:
    """Last min(t_h, index(t) + 1) days of the history ending at t inclusive."""
    return slice_at_index(history, history.index_of(t), t_h)


def slice_at_index(history: PlayerHistory, index: int, t_h: int) -> Trajectory:
    if not 0 <= index < history.n_days:
        raise DateRangeError(
            f"Day index {index} outside history of player {history.player_id}"
        )
    return Trajectory(
        values=history.values[max(0, index - t_h + 1) : index + 1],
        end_date=history.date_at(index),
    )
