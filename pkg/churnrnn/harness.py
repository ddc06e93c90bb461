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

"""The three experiments: cell comparison, T_0 sweep and time robustness.

Every experiment writes into `config.output_dir`:

* `manifest.yaml`: resolved config, package versions, seeds
* `runs.jsonl`: one MetricsReport per trained model and evaluation
* `summary.csv` / `summary.txt`: mean ± std over seeds
* `sweep_t0.csv` or `time_robustness.csv`: plot-ready series
* `logs/*.csv` training histories and `models/*.model` files
"""

from __future__ import annotations

import datetime as dt
import importlib.metadata
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import yaml
from joblib import Parallel, delayed

from churnrnn import __version__
from churnrnn.dataset import SampleSet, build_learning_set, build_test_set
from churnrnn.errors import ConfigError, CoverageError, EmptySetError
from churnrnn.files import atomic_open, write_csv
from churnrnn.metrics import (
    MetricsReport,
    MetricSummary,
    aggregate_over_seeds,
    evaluate,
    format_table,
    records_to_reports,
    reports_to_records,
    summary_records,
)
from churnrnn.optim import TrainingHistory, train
from churnrnn.rnn import NetworkParameters, save_model
from churnrnn.schema import CellKind, ExperimentKind
from churnrnn.settings import ExperimentConfig
from churnrnn.synth import generate_population
from churnrnn.timeseries import PlayerHistory, ingest_activity_file, read_series

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.yaml"
RUNS_FILE = "runs.jsonl"
SUMMARY_CSV = "summary.csv"
SUMMARY_TXT = "summary.txt"
SWEEP_T0_FILE = "sweep_t0.csv"
TIME_ROBUSTNESS_FILE = "time_robustness.csv"

FROZEN = "frozen"
REFRESHED = "refreshed"

_VERSIONED_PACKAGES = ("numpy", "pandas", "pydantic", "pydantic-settings", "joblib")

Summary = Dict[str, Dict[str, MetricSummary]]


def load_histories(config: ExperimentConfig, n_jobs: int = 1) -> List[PlayerHistory]:
    data = config.data
    population = data.population_config()
    if population is not None:
        return generate_population(population, config.feature_schema, n_jobs)
    assert data.registrations is not None
    if data.activity is not None:
        _, end = required_span(config)
        return ingest_activity_file(
            data.activity,
            data.registrations,
            config.feature_schema,
            end,
            data.log_start,
            n_jobs,
        )
    assert data.series is not None
    return read_series(data.series, data.registrations, config.feature_schema)


def required_span(config: ExperimentConfig) -> Tuple[dt.date, dt.date]:
    """Calendar range [T_0 - T_h, t_max + T_pred + T_c] the experiment reads."""
    t0 = min([config.eligibility.t0, *config.t0_values])
    t_max = max([config.t, *config.t_prime_values])
    start = t0 - dt.timedelta(days=config.eligibility.t_h)
    end = t_max + dt.timedelta(days=config.churn.t_pred + config.churn.t_c)
    return start, end


def check_coverage(
    histories: Sequence[PlayerHistory], config: ExperimentConfig
) -> None:
    if not histories:
        raise CoverageError("No player histories to run on")
    start, end = required_span(config)
    for history in histories:
        if history.start_date > start or history.end_date < end:
            raise CoverageError(
                f"Experiment needs data over {start} .. {end}; player "
                f"{history.player_id} covers {history.start_date} .. "
                f"{history.end_date}"
            )


@dataclass
class RunTask:
    """One model to train and the test sets to score it on."""

    cell: CellKind
    seed: int
    learning: SampleSet
    tests: Dict[str, SampleSet]
    tags: Dict[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        parts = [self.cell.value, f"seed{self.seed}"]
        parts += [f"{k}-{v}" for k, v in self.tags.items() if k != "experiment"]
        return "_".join(str(p) for p in parts)


def run_task(
    task: RunTask, config: ExperimentConfig, out_dir: Path
) -> Tuple[NetworkParameters, List[MetricsReport]]:
    """Train one model and evaluate it on each of its test sets."""
    history = TrainingHistory()
    logger.info(f"Training {task.name} on {len(task.learning)} samples")
    params = train(
        config.architecture_for(task.cell),
        task.learning,
        config.trainer_for(task.seed),
        history,
    )
    write_csv(history.to_frame(), out_dir / "logs" / f"{task.name}.csv")
    if config.save_models:
        save_model(params, out_dir / "models" / f"{task.name}.model")
    reports = []
    for test_name, test_set in task.tests.items():
        report = evaluate(params, test_set, config.threshold, task.seed)
        report.tags = {
            **task.tags,
            "cell": task.cell.value,
            "test": test_name,
            "learning_size": len(task.learning),
            "test_size": len(test_set),
        }
        reports.append(report)
    return params, reports


def _run_all(
    tasks: Sequence[RunTask], config: ExperimentConfig, out_dir: Path, n_jobs: int
) -> List[Tuple[NetworkParameters, List[MetricsReport]]]:
    results: List[Tuple[NetworkParameters, List[MetricsReport]]] = Parallel(
        n_jobs=n_jobs
    )(delayed(run_task)(task, config, out_dir) for task in tasks)
    return results


def write_manifest(config: ExperimentConfig, out_dir: Path) -> None:
    """Resolved config, data file checksums, package versions and seeds."""
    versions = {"churnrnn": __version__}
    for package in _VERSIONED_PACKAGES:
        try:
            versions[package] = importlib.metadata.version(package)
        except importlib.metadata.PackageNotFoundError:
            versions[package] = "unknown"
    manifest = {
        "config": config.resolved().model_dump(mode="json"),
        "data_checksums": config.data.checksums(),
        "versions": versions,
        "seeds": list(config.seeds),
    }
    with atomic_open(out_dir / MANIFEST_FILE) as f:
        yaml.safe_dump(manifest, f, sort_keys=False)


def load_manifest(path: str | Path, **overrides: Any) -> ExperimentConfig:
    """The config a manifest was written for; stored data must be unchanged."""
    with open(path) as f:
        manifest = yaml.safe_load(f)
    config = ExperimentConfig.load(None, **{**manifest["config"], **overrides})
    recorded = manifest.get("data_checksums", {})
    changed = sorted(
        name
        for name, digest in config.data.checksums().items()
        if recorded.get(name) != digest
    )
    if changed:
        raise ConfigError(f"Data files changed since {path} was written: {changed}")
    return config


def write_runs(reports: Sequence[MetricsReport], path: Path) -> None:
    with atomic_open(path) as f:
        for line in reports_to_records(reports):
            f.write(line + "\n")


def read_runs(path: str | Path) -> List[MetricsReport]:
    with open(path) as f:
        return records_to_reports(f)


def _write_summary(summary: Summary, out_dir: Path, key_name: str) -> None:
    write_csv(
        pd.DataFrame(summary_records(summary, key_name)), out_dir / SUMMARY_CSV
    )
    table = format_table(summary, key_name)
    with atomic_open(out_dir / SUMMARY_TXT) as f:
        f.write(table + "\n")
    logger.info(f"Summary\n{table}")


def _prepare(
    config: ExperimentConfig,
    histories: Optional[Sequence[PlayerHistory]],
    n_jobs: int,
) -> Tuple[List[PlayerHistory], Path]:
    if histories is None:
        histories = load_histories(config, n_jobs)
    loaded = list(histories)
    check_coverage(loaded, config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(config, out_dir)
    return loaded, out_dir


def _sets_at(
    histories: Sequence[PlayerHistory],
    t: dt.date,
    config: ExperimentConfig,
    t0: Optional[dt.date] = None,
) -> Tuple[SampleSet, SampleSet]:
    eligibility = config.eligibility
    if t0 is not None:
        eligibility = eligibility.model_copy(update={"t0": t0})
    learning = build_learning_set(
        histories, t, eligibility, config.churn, config.feature_schema
    )
    test = build_test_set(
        histories, t, eligibility, config.churn, config.feature_schema
    )
    return learning, test


def run_standard(
    config: ExperimentConfig,
    histories: Optional[Sequence[PlayerHistory]] = None,
    n_jobs: int = 1,
) -> Summary:
    """Train every (cell, seed) at t, score on the test set, aggregate per cell."""
    histories, out_dir = _prepare(config, histories, n_jobs)
    learning, test = _sets_at(histories, config.t, config)
    if not len(learning):
        raise EmptySetError(f"Learning set at {config.t} is empty")
    tags = {"experiment": ExperimentKind.STANDARD.value, "t": config.t.isoformat()}
    tasks = [
        RunTask(cell, seed, learning, {"test": test}, dict(tags))
        for cell in config.cells
        for seed in config.seeds
    ]
    reports = [r for _, rs in _run_all(tasks, config, out_dir, n_jobs) for r in rs]
    write_runs(reports, out_dir / RUNS_FILE)
    summary = {
        cell.value: aggregate_over_seeds(
            [r for r in reports if r.tags["cell"] == cell.value]
        )
        for cell in config.cells
    }
    _write_summary(summary, out_dir, "cell")
    return summary


def run_sweep_t0(
    config: ExperimentConfig,
    histories: Optional[Sequence[PlayerHistory]] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """One model per (T_0, cell, seed) at fixed t; empty learning sets are skipped."""
    histories, out_dir = _prepare(config, histories, n_jobs)
    test = build_test_set(
        histories, config.t, config.eligibility, config.churn, config.feature_schema
    )
    tasks: List[RunTask] = []
    sizes: Dict[dt.date, int] = {}
    for t0 in config.t0_values:
        swept = config.eligibility.model_copy(update={"t0": t0})
        learning = build_learning_set(
            histories, config.t, swept, config.churn, config.feature_schema
        )
        sizes[t0] = len(learning)
        if not len(learning):
            logger.warning(f"Learning set is empty for T_0={t0}; skipping")
            continue
        tags = {"experiment": ExperimentKind.SWEEP_T0.value, "t0": t0.isoformat()}
        tasks += [
            RunTask(cell, seed, learning, {"test": test}, dict(tags))
            for cell in config.cells
            for seed in config.seeds
        ]
    reports = [r for _, rs in _run_all(tasks, config, out_dir, n_jobs) for r in rs]
    write_runs(reports, out_dir / RUNS_FILE)

    rows: List[Dict[str, Any]] = []
    summary: Summary = {}
    for t0 in config.t0_values:
        for cell in config.cells:
            point = [
                r
                for r in reports
                if r.tags["t0"] == t0.isoformat() and r.tags["cell"] == cell.value
            ]
            row: Dict[str, Any] = {
                "t0": t0.isoformat(),
                "cell": cell.value,
                "learning_set_size": sizes[t0],
                "skipped": not point,
            }
            if point:
                aggregate = aggregate_over_seeds(point)
                summary[f"{t0.isoformat()} {cell.value}"] = aggregate
                for name, metric in aggregate.items():
                    row[f"{name}_mean"] = metric.mean
                    row[f"{name}_std"] = metric.std
            rows.append(row)
    frame = pd.DataFrame(rows)
    write_csv(frame, out_dir / SWEEP_T0_FILE)
    _write_summary(summary, out_dir, "t0 cell")
    return frame


def run_time_robustness(
    config: ExperimentConfig,
    histories: Optional[Sequence[PlayerHistory]] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Models frozen at t against models refreshed at every t'.

    Both the frozen and the refreshed model of seed s are trained with seed s.
    """
    histories, out_dir = _prepare(config, histories, n_jobs)
    base_learning = build_learning_set(
        histories, config.t, config.eligibility, config.churn, config.feature_schema
    )
    if not len(base_learning):
        raise EmptySetError(f"Learning set at {config.t} is empty")
    tests: Dict[str, SampleSet] = {}
    tasks: List[RunTask] = []
    experiment = ExperimentKind.TIME_ROBUSTNESS.value
    for t_prime in config.t_prime_values:
        learning, test = _sets_at(histories, t_prime, config)
        tests[t_prime.isoformat()] = test
        if not len(learning):
            logger.warning(f"Learning set at {t_prime} is empty; no refreshed model")
            continue
        tags = {
            "experiment": experiment,
            "model": REFRESHED,
            "t_prime": t_prime.isoformat(),
        }
        tasks += [
            RunTask(cell, seed, learning, {t_prime.isoformat(): test}, dict(tags))
            for cell in config.cells
            for seed in config.seeds
        ]
    frozen_tags = {"experiment": experiment, "model": FROZEN}
    tasks = [
        RunTask(cell, seed, base_learning, tests, dict(frozen_tags))
        for cell in config.cells
        for seed in config.seeds
    ] + tasks
    reports = [r for _, rs in _run_all(tasks, config, out_dir, n_jobs) for r in rs]
    for report in reports:
        report.tags.setdefault("t_prime", report.tags["test"])
    write_runs(reports, out_dir / RUNS_FILE)

    rows: List[Dict[str, Any]] = []
    summary: Summary = {}
    for t_prime in config.t_prime_values:
        for cell in config.cells:
            for model in (FROZEN, REFRESHED):
                point = [
                    r
                    for r in reports
                    if r.tags["t_prime"] == t_prime.isoformat()
                    and r.tags["cell"] == cell.value
                    and r.tags["model"] == model
                ]
                if not point:
                    continue
                aggregate = aggregate_over_seeds(point)
                summary[f"{t_prime.isoformat()} {cell.value} {model}"] = aggregate
                row: Dict[str, Any] = {
                    "t_prime": t_prime.isoformat(),
                    "cell": cell.value,
                    "model": model,
                    "test_set_size": len(tests[t_prime.isoformat()]),
                }
                for name, metric in aggregate.items():
                    row[f"{name}_mean"] = metric.mean
                    row[f"{name}_std"] = metric.std
                rows.append(row)
    frame = pd.DataFrame(rows)
    write_csv(frame, out_dir / TIME_ROBUSTNESS_FILE)
    _write_summary(summary, out_dir, "t_prime cell model")
    return frame


def run_experiment(
    config: ExperimentConfig,
    histories: Optional[Sequence[PlayerHistory]] = None,
    n_jobs: int = 1,
) -> Any:
    runners = {
        ExperimentKind.STANDARD: run_standard,
        ExperimentKind.SWEEP_T0: run_sweep_t0,
        ExperimentKind.TIME_ROBUSTNESS: run_time_robustness,
    }
    return runners[config.kind](config, histories, n_jobs)
