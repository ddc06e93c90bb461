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

"""Synthetic player populations in the canonical feature layout.

Each player draws an archetype and a registration date, then lives day by
day: an active day happens with the archetype's weekday-modulated rate until
a hazard-drawn quit day, after which the player never plays again. Active
days carry Poisson counts and a clipped normal GGR on the products played;
inactive days may still carry an idle login.
"""

from __future__ import annotations

import datetime as dt
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from churnrnn.dataset import build_test_set, class_balance
from churnrnn.errors import CalibrationError, ConfigError
from churnrnn.files import write_csv
from churnrnn.schema import (
    ArchetypeSpec,
    ChurnParams,
    EligibilityParams,
    FeatureSchema,
    PopulationConfig,
)
from churnrnn.timeseries import (
    PlayerHistory,
    export_activity_log,
    recompute_days_since_active,
    write_series,
)

logger = logging.getLogger(__name__)

COUNT_MEANS: Dict[str, str] = {
    "casino_plays": "mean_plays",
    "sport_tickets": "mean_tickets",
    "deposits": "mean_deposits",
    "withdrawals": "mean_withdrawals",
    "connections": "mean_connections",
}
# GGR feature -> the count feature that must be nonzero for it to be nonzero.
GGR_DRIVERS: Dict[str, str] = {
    "casino_ggr": "casino_plays",
    "sport_ggr": "sport_tickets",
}
GGR_CLIP_STD: float = 4.0

ACTIVITY_FILE = "activity.csv"
REGISTRATIONS_FILE = "registrations.csv"
SERIES_FILE = "series.csv"


def player_id(index: int) -> str:
    return f"p{index:06d}"


def _check_shock_features(config: PopulationConfig, schema: FeatureSchema) -> None:
    known = set(COUNT_MEANS) | set(GGR_DRIVERS)
    missing = known - set(schema.names)
    if missing:
        raise ConfigError(f"Generator needs features {sorted(missing)} in the schema")
    for shock in config.shocks:
        unknown = set(shock.multipliers) - known
        if unknown:
            raise ConfigError(
                f"Shock {shock.start}..{shock.end} names unknown features "
                f"{sorted(unknown)}"
            )


def _shock_multipliers(
    config: PopulationConfig, first_day: dt.date, n_days: int
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    activity = np.ones(n_days)
    features = {name: np.ones(n_days) for name in (*COUNT_MEANS, *GGR_DRIVERS)}
    for shock in config.shocks:
        lo = max((shock.start - first_day).days, 0)
        hi = min((shock.end - first_day).days + 1, n_days)
        if hi <= lo:
            continue
        activity[lo:hi] *= shock.activity_multiplier
        for name, factor in shock.multipliers.items():
            features[name][lo:hi] *= factor
    return activity, features


def _simulate_days(
    archetype: ArchetypeSpec,
    config: PopulationConfig,
    first_day: dt.date,
    n_days: int,
    registration_index: int,
    quit_index: Optional[int],
    rng: np.random.Generator,
    schema: FeatureSchema,
) -> np.ndarray:
    """Daily feature matrix from `first_day`, recency column left at 0."""
    idx = np.arange(n_days)
    alive = idx >= registration_index
    if quit_index is not None:
        alive &= idx < quit_index
    weekdays = (first_day.weekday() + idx) % 7
    activity_mult, feature_mult = _shock_multipliers(config, first_day, n_days)

    weekly = np.asarray(archetype.weekly_profile)[weekdays]
    rate = archetype.daily_activity_rate * weekly
    active = alive & (rng.random(n_days) < np.clip(rate * activity_mult, 0.0, 1.0))

    counts = {
        name: rng.poisson(getattr(archetype, mean) * feature_mult[name]).astype(
            np.float64
        )
        for name, mean in COUNT_MEANS.items()
    }
    churn_names = [schema.names[i] for i in schema.churn_indices]
    weights = np.stack(
        [getattr(archetype, COUNT_MEANS[n]) * feature_mult[n] for n in churn_names],
        axis=1,
    )
    totals = weights.sum(axis=1)
    pick = rng.random(n_days)
    silent = np.stack([counts[n] for n in churn_names], axis=1).sum(axis=1) == 0
    # Every churn-defining channel shut: the day cannot be active.
    active &= ~(silent & (totals <= 0))
    force = active & silent
    if force.any():
        cumulative = np.cumsum(weights[force], axis=1)
        chosen = (pick[force, None] * totals[force, None] >= cumulative).sum(axis=1)
        chosen = np.minimum(chosen, len(churn_names) - 1)
        for k, name in enumerate(churn_names):
            counts[name][np.flatnonzero(force)[chosen == k]] = 1.0

    ggr: Dict[str, np.ndarray] = {}
    for name in GGR_DRIVERS:
        draw = rng.normal(archetype.ggr_mean, archetype.ggr_std, n_days)
        bound = GGR_CLIP_STD * archetype.ggr_std
        draw = np.clip(draw, archetype.ggr_mean - bound, archetype.ggr_mean + bound)
        ggr[name] = draw * feature_mult[name]

    idle = alive & ~active & (rng.random(n_days) < archetype.idle_connection_rate)

    values = np.zeros((n_days, schema.n))
    for name, column in counts.items():
        values[:, schema.index(name)] = np.where(active, column, 0.0)
    for name, driver in GGR_DRIVERS.items():
        played = values[:, schema.index(driver)] > 0
        values[:, schema.index(name)] = np.where(played, ggr[name], 0.0)
    connections = schema.index("connections")
    values[:, connections] = np.where(idle, 1.0, values[:, connections])
    return values


def generate_player(
    config: PopulationConfig, index: int, schema: FeatureSchema
) -> PlayerHistory:
    rng = np.random.default_rng([config.seed, index])
    weights = np.array([a.weight for a in config.archetypes])
    archetype = config.archetypes[int(rng.choice(len(weights), p=weights))].archetype
    span = (config.registration_end - config.registration_start).days
    registration = config.registration_start + dt.timedelta(
        days=int(rng.integers(0, span + 1))
    )
    # Players registered before the calendar are simulated from registration
    # so their recency carries over into the window.
    first_day = min(registration, config.start_date)
    n_days = (config.end_date - first_day).days + 1
    registration_index = (registration - first_day).days
    quit_index = (
        registration_index + int(rng.geometric(archetype.churn_hazard))
        if archetype.churn_hazard > 0
        else None
    )
    values = _simulate_days(
        archetype,
        config,
        first_day,
        n_days,
        registration_index,
        quit_index,
        rng,
        schema,
    )
    full = recompute_days_since_active(
        PlayerHistory(player_id(index), registration, first_day, values), schema
    )
    offset = (config.start_date - first_day).days
    seed = 0
    if offset and schema.recency_index is not None:
        seed = int(full.values[offset - 1, schema.recency_index])
    return recompute_days_since_active(
        PlayerHistory(
            player_id=player_id(index),
            registration_date=registration,
            start_date=config.start_date,
            values=np.ascontiguousarray(values[offset:]),
            days_since_active_at_start=seed,
        ),
        schema,
    )


def generate_population(
    config: PopulationConfig,
    schema: Optional[FeatureSchema] = None,
    n_jobs: int = 1,
) -> List[PlayerHistory]:
    """Deterministic in `config.seed`; players are sorted by id."""
    schema = schema or FeatureSchema.canonical()
    _check_shock_features(config, schema)
    histories: List[PlayerHistory] = Parallel(n_jobs=n_jobs)(
        delayed(generate_player)(config, i, schema) for i in range(config.player_count)
    )
    logger.info(
        f"Generated {len(histories)} players over {config.start_date} .. "
        f"{config.end_date}"
    )
    return histories


def write_population(
    histories: List[PlayerHistory], out_dir: str | Path, schema: FeatureSchema
) -> None:
    """`activity.csv`, `registrations.csv` and `series.csv` under `out_dir`."""
    out = Path(out_dir)
    write_csv(export_activity_log(histories, schema), out / ACTIVITY_FILE)
    write_series(histories, schema, out / SERIES_FILE, out / REGISTRATIONS_FILE)
    logger.info(f"Wrote {len(histories)} players to {out}")


def estimate_prevalence(
    config: PopulationConfig,
    t: dt.date,
    eligibility: EligibilityParams,
    churn: Optional[ChurnParams] = None,
    schema: Optional[FeatureSchema] = None,
    n_jobs: int = 1,
) -> float:
    """Churn share of the test set at t over a freshly generated population."""
    schema = schema or FeatureSchema.canonical()
    histories = generate_population(config, schema, n_jobs)
    return class_balance(build_test_set(histories, t, eligibility, churn, schema))


def calibrate_prevalence(
    config: PopulationConfig,
    target: float,
    t: dt.date,
    eligibility: EligibilityParams,
    churn: Optional[ChurnParams] = None,
    schema: Optional[FeatureSchema] = None,
    tolerance: float = 0.02,
    bounds: Tuple[float, float] = (0.0, 8.0),
    sample_size: int = 5000,
    max_iterations: int = 30,
    n_jobs: int = 1,
) -> PopulationConfig:
    """Scale every churn hazard by one bisected factor to hit `target`.

    Prevalence is measured on `sample_size` players; the returned config
    keeps the original player count.
    """
    if not 0.0 <= target < 1.0:
        raise ConfigError(f"Target prevalence must lie in [0, 1), got {target}")
    trial = config.model_copy(
        update={"player_count": max(config.player_count, sample_size)}
    )

    def prevalence(factor: float) -> float:
        value = estimate_prevalence(
            trial.with_hazard_scale(factor), t, eligibility, churn, schema, n_jobs
        )
        logger.info(f"Hazard scale {factor:.6g}: prevalence {value:.4f}")
        return value

    if abs(prevalence(1.0) - target) <= tolerance:
        return config
    lo, hi = bounds
    p_lo, p_hi = prevalence(lo), prevalence(hi)
    if not p_lo - tolerance <= target <= p_hi + tolerance:
        raise CalibrationError(
            f"Hazard scales {lo}..{hi} give prevalence {p_lo:.4f}..{p_hi:.4f}, "
            f"which does not bracket {target}"
        )
    for factor, value in ((lo, p_lo), (hi, p_hi)):
        if abs(value - target) <= tolerance:
            return config.with_hazard_scale(factor)
    for _ in range(max_iterations):
        mid = 0.5 * (lo + hi)
        value = prevalence(mid)
        if abs(value - target) <= tolerance:
            return config.with_hazard_scale(mid)
        if value < target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        f"No hazard scale within {max_iterations} bisections reached {target}"
    )
