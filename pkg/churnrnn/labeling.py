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

"""Churn variable, active-day predicate and churn indicator."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np
import pandas as pd

from churnrnn.errors import DateRangeError, InsufficientFutureError
from churnrnn.schema import DATE_COLUMN, PLAYER_ID_COLUMN, ChurnParams, FeatureSchema
from churnrnn.timeseries import PlayerHistory, active_mask


def is_active_day(x: np.ndarray, schema: FeatureSchema) -> bool:
    if x.shape[-1] != schema.n:
        raise ValueError(f"Expected {schema.n} features, got {x.shape[-1]}")
    return bool(active_mask(x, schema))


def _window_activity(values: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Cumulative count of active days, prefixed with 0."""
    return np.concatenate(([0], np.cumsum(active_mask(values, schema))))


def churn_variable(
    history: PlayerHistory, t: int, params: ChurnParams, schema: FeatureSchema
) -> int:
    """Churn variable at t: 1 iff no activity over days t - T_c + 1 .. t."""
    if t < params.t_c - 1 or t >= history.n_days:
        raise DateRangeError(
            f"Churn window ending at day {t} needs {params.t_c - 1} <= t < "
            f"{history.n_days}"
        )
    window = history.values[t - params.t_c + 1 : t + 1, schema.churn_indices]
    # Counts are exact in float64, so a zero sum is an exact comparison.
    return int(np.abs(window).sum() == 0)


def churn_indicator(
    history: PlayerHistory, t: int, params: ChurnParams, schema: FeatureSchema
) -> int:
    """Churn indicator at t: 1 iff churned on some day in t + 1 .. t + T_pred."""
    if t + params.t_pred >= history.n_days:
        raise InsufficientFutureError(
            f"Horizon of day {t} ends at {t + params.t_pred}, series has "
            f"{history.n_days} days"
        )
    if t + 1 < params.t_c - 1:
        raise DateRangeError(
            f"Churn variables after day {t} need at least {params.t_c - 1} days "
            "of history"
        )
    return min(
        1,
        sum(
            churn_variable(history, i, params, schema)
            for i in range(t + 1, t + params.t_pred + 1)
        ),
    )


def churn_variables(
    history: PlayerHistory, params: ChurnParams, schema: FeatureSchema
) -> np.ndarray:
    """Churn variable for every day; NaN where the window leaves the series."""
    out = np.full(history.n_days, np.nan)
    if history.n_days < params.t_c:
        return out
    cum = _window_activity(history.values, schema)
    ends = np.arange(params.t_c - 1, history.n_days)
    active = cum[ends + 1] - cum[ends + 1 - params.t_c]
    out[ends] = (active == 0).astype(np.float64)
    return out


def churn_indicators(
    history: PlayerHistory, params: ChurnParams, schema: FeatureSchema
) -> np.ndarray:
    """Churn indicator for every day; NaN where the horizon is not fully computable."""
    c = churn_variables(history, params, schema)
    out = np.full(history.n_days, np.nan)
    first = max(params.t_c - 2, 0)
    last = history.n_days - 1 - params.t_pred
    if last < first:
        return out
    c_filled = np.nan_to_num(c, nan=0.0)
    cum = np.concatenate(([0.0], np.cumsum(c_filled)))
    ts = np.arange(first, last + 1)
    fired = cum[ts + params.t_pred + 1] - cum[ts + 1]
    out[ts] = (fired > 0).astype(np.float64)
    return out


def label_histories(
    histories: Sequence[PlayerHistory], params: ChurnParams, schema: FeatureSchema
) -> pd.DataFrame:
    """`player_id,date,c,y` for every day where both labels are computable."""
    frames: List[pd.DataFrame] = []
    for history in histories:
        c = churn_variables(history, params, schema)
        y = churn_indicators(history, params, schema)
        keep = np.flatnonzero(~np.isnan(c) & ~np.isnan(y))
        frames.append(
            pd.DataFrame(
                {
                    PLAYER_ID_COLUMN: history.player_id,
                    DATE_COLUMN: [history.date_at(int(i)).isoformat() for i in keep],
                    "c": c[keep].astype(int),
                    "y": y[keep].astype(int),
                }
            )
        )
    if not frames:
        return pd.DataFrame(columns=[PLAYER_ID_COLUMN, DATE_COLUMN, "c", "y"])
    return pd.concat(frames, ignore_index=True)
