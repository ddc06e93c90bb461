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

"""Learning and test sets built under the activity conditions.

A (trajectory, indicator) pair of player p at day t' enters the learning set
of date t when

* max(T_0, registration + t0_offset) <= t' <= t - T_pred, and
* p has >= min_active_days active days in [t' - window, t' - 1].

Only data up to t is read while building the learning set.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from churnrnn.errors import ConfigError, EmptySetError, InsufficientFutureError
from churnrnn.files import atomic_open
from churnrnn.labeling import churn_indicators
from churnrnn.schema import (
    ChurnParams,
    EligibilityParams,
    FeatureSchema,
    SampleKind,
)
from churnrnn.timeseries import (
    PlayerHistory,
    Trajectory,
    active_mask,
    slice_at_index,
)

logger = logging.getLogger(__name__)

SAMPLE_FILE_FORMAT: str = "churnrnn-samples"
SAMPLE_FILE_VERSION: int = 1


@dataclass
class LabeledSample:
    trajectory: Trajectory
    label: int
    player_id: str
    t_prime: dt.date


@dataclass
class SampleSet:
    samples: List[LabeledSample]
    kind: SampleKind
    as_of: dt.date
    excluded: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)

    def trajectories(self) -> List[np.ndarray]:
        return [s.trajectory.values for s in self.samples]


@dataclass
class _PlayerSamples:
    samples: List[LabeledSample] = field(default_factory=list)
    excluded: int = 0


def _recent_activity(
    history: PlayerHistory, days: np.ndarray, window: int, schema: FeatureSchema
) -> np.ndarray:
    """Active-day counts over [d - window, d - 1] for each day index d.

    Days before the series start count as inactive.
    """
    cum = np.concatenate(([0], np.cumsum(active_mask(history.values, schema))))
    return cum[days] - cum[np.maximum(days - window, 0)]


def _lower_bound(history: PlayerHistory, params: EligibilityParams) -> int:
    return max(
        (params.t0 - history.start_date).days,
        history.registration_index + params.t0_offset,
        0,
    )


def _eligible_indices(
    history: PlayerHistory,
    t_index: int,
    params: EligibilityParams,
    schema: FeatureSchema,
) -> np.ndarray:
    lower = _lower_bound(history, params)
    upper = t_index - params.t_pred
    if upper < lower:
        return np.empty(0, dtype=np.int64)
    days = np.arange(lower, upper + 1)
    recent = _recent_activity(history, days, params.recent_activity_window, schema)
    return days[recent >= params.min_active_days]


def eligible_learning_times(
    history: PlayerHistory,
    t: dt.date,
    params: EligibilityParams,
    schema: Optional[FeatureSchema] = None,
) -> List[dt.date]:
    """Dates t' at which `history` contributes a pair to the learning set at t."""
    schema = schema or FeatureSchema.canonical()
    t_index = history.index_of(t)
    return [
        history.date_at(int(k))
        for k in _eligible_indices(history.until(t), t_index, params, schema)
    ]


def _check_horizons(params: EligibilityParams, churn: ChurnParams) -> None:
    if params.t_pred != churn.t_pred:
        raise ConfigError(
            f"Eligibility horizon T_pred={params.t_pred} differs from the churn "
            f"definition T_pred={churn.t_pred}"
        )


def player_learning_samples(
    history: PlayerHistory,
    t: dt.date,
    params: EligibilityParams,
    churn: ChurnParams,
    schema: FeatureSchema,
) -> _PlayerSamples:
    """Learning pairs of one player, using data up to t only."""
    known = history.until(t)
    t_index = known.n_days - 1
    days = _eligible_indices(known, t_index, params, schema)
    if not days.size:
        return _PlayerSamples()
    labels = churn_indicators(known, churn, schema)[days]
    computable = ~np.isnan(labels)
    out = _PlayerSamples(excluded=int((~computable).sum()))
    for k, label in zip(days[computable], labels[computable]):
        out.samples.append(
            LabeledSample(
                trajectory=slice_at_index(known, int(k), params.t_h),
                label=int(label),
                player_id=history.player_id,
                t_prime=known.date_at(int(k)),
            )
        )
    return out


def build_learning_set(
    histories: Iterable[PlayerHistory],
    t: dt.date,
    params: EligibilityParams,
    churn: Optional[ChurnParams] = None,
    schema: Optional[FeatureSchema] = None,
) -> SampleSet:
    """Learning set at t, ordered by (player_id, t')."""
    churn = churn or ChurnParams(t_pred=params.t_pred)
    schema = schema or FeatureSchema.canonical()
    _check_horizons(params, churn)
    samples: List[LabeledSample] = []
    excluded = 0
    for history in sorted(histories, key=lambda h: h.player_id):
        player = player_learning_samples(history, t, params, churn, schema)
        samples.extend(player.samples)
        excluded += player.excluded
    if excluded:
        logger.warning(
            f"Excluded {excluded} eligible pairs of the {t} learning set whose "
            "labels are not computable from the data range"
        )
    logger.info(
        f"Built learning set at {t} with {len(samples)} samples (T_0={params.t0})"
    )
    return SampleSet(samples, SampleKind.LEARNING, t, excluded)


def build_test_set(
    histories: Iterable[PlayerHistory],
    t: dt.date,
    params: EligibilityParams,
    churn: Optional[ChurnParams] = None,
    schema: Optional[FeatureSchema] = None,
) -> SampleSet:
    """Test set at t: players registered >= t0_offset days, recently active."""
    churn = churn or ChurnParams(t_pred=params.t_pred)
    schema = schema or FeatureSchema.canonical()
    _check_horizons(params, churn)
    samples: List[LabeledSample] = []
    excluded = 0
    for history in sorted(histories, key=lambda h: h.player_id):
        t_index = history.index_of(t)
        if t_index + churn.t_pred >= history.n_days:
            raise InsufficientFutureError(
                f"Test set at {t} needs data until "
                f"{t + dt.timedelta(days=churn.t_pred)}, "
                f"series of {history.player_id} ends {history.end_date}"
            )
        if (t - history.registration_date).days < params.t0_offset:
            continue
        recent = _recent_activity(
            history, np.array([t_index]), params.recent_activity_window, schema
        )
        if recent[0] < params.min_active_days:
            continue
        label = churn_indicators(
            history.until(history.date_at(t_index + churn.t_pred)), churn, schema
        )[t_index]
        if np.isnan(label):
            excluded += 1
            continue
        samples.append(
            LabeledSample(
                trajectory=slice_at_index(history, t_index, params.t_h),
                label=int(label),
                player_id=history.player_id,
                t_prime=t,
            )
        )
    logger.info(f"Built test set at {t} with {len(samples)} samples")
    return SampleSet(samples, SampleKind.TEST, t, excluded)


def class_balance(sample_set: SampleSet) -> float:
    """Fraction of samples labelled churn."""
    if not len(sample_set):
        raise EmptySetError(f"Class balance of empty {sample_set.kind.value} set")
    return float(sample_set.labels().mean())


def learning_set_sizes(
    histories: Sequence[PlayerHistory],
    t: dt.date,
    params: EligibilityParams,
    t0_values: Sequence[dt.date],
    churn: Optional[ChurnParams] = None,
    schema: Optional[FeatureSchema] = None,
) -> Dict[dt.date, int]:
    """Learning-set size at t for each candidate T_0."""
    churn = churn or ChurnParams(t_pred=params.t_pred)
    schema = schema or FeatureSchema.canonical()
    sizes: Dict[dt.date, int] = {}
    for t0 in t0_values:
        swept = params.model_copy(update={"t0": t0})
        sizes[t0] = sum(
            len(player_learning_samples(h, t, swept, churn, schema).samples)
            for h in histories
        )
    return sizes


class SampleSetHeader(BaseModel):
    format: str = SAMPLE_FILE_FORMAT
    version: int = SAMPLE_FILE_VERSION
    kind: SampleKind
    as_of: dt.date
    excluded: int = 0
    size: int
    feature_schema: FeatureSchema
    eligibility: EligibilityParams
    churn: ChurnParams


def write_sample_set(
    sample_set: SampleSet,
    path: str | Path,
    schema: FeatureSchema,
    eligibility: EligibilityParams,
    churn: ChurnParams,
) -> None:
    """Header line, then one JSON record per sample with row-major values."""
    header = SampleSetHeader(
        kind=sample_set.kind,
        as_of=sample_set.as_of,
        excluded=sample_set.excluded,
        size=len(sample_set),
        feature_schema=schema,
        eligibility=eligibility,
        churn=churn,
    )
    with atomic_open(path) as f:
        f.write(header.model_dump_json() + "\n")
        for s in sample_set.samples:
            record = {
                "player_id": s.player_id,
                "t_prime": s.t_prime.isoformat(),
                "label": s.label,
                "length": len(s.trajectory),
                "values": s.trajectory.values.ravel().tolist(),
            }
            f.write(json.dumps(record) + "\n")


def read_sample_set(path: str | Path) -> Tuple[SampleSet, SampleSetHeader]:
    with open(path) as f:
        header = SampleSetHeader.model_validate_json(f.readline())
        if (
            header.format != SAMPLE_FILE_FORMAT
            or header.version > SAMPLE_FILE_VERSION
        ):
            raise ConfigError(
                f"Unsupported sample file {header.format} v{header.version}"
            )
        n = header.feature_schema.n
        samples: List[LabeledSample] = []
        for number, line in enumerate(f, start=2):
            try:
                record = json.loads(line)
                t_prime = dt.date.fromisoformat(record["t_prime"])
                values = np.asarray(record["values"], dtype=np.float64).reshape(
                    record["length"], n
                )
            except (ValueError, KeyError) as e:
                raise ConfigError(f"{path}:{number}: malformed sample record") from e
            samples.append(
                LabeledSample(
                    trajectory=Trajectory(values=values, end_date=t_prime),
                    label=int(record["label"]),
                    player_id=record["player_id"],
                    t_prime=t_prime,
                )
            )
    if len(samples) != header.size:
        raise ConfigError(
            f"{path} holds {len(samples)} samples, header says {header.size}"
        )
    return SampleSet(samples, header.kind, header.as_of, header.excluded), header
