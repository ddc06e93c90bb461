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

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import pandas as pd
from pydantic import ValidationError

from churnrnn.dataset import (
    build_learning_set,
    build_test_set,
    read_sample_set,
    write_sample_set,
)
from churnrnn.errors import ChurnRNNError, ConfigError, ExitCode
from churnrnn.files import atomic_open, write_csv
from churnrnn.harness import load_histories, run_experiment
from churnrnn.labeling import label_histories
from churnrnn.metrics import evaluate, reports_to_records
from churnrnn.optim import TrainingHistory, train
from churnrnn.rnn import load_model, save_model
from churnrnn.schema import (
    CellKind,
    ChurnParams,
    EligibilityParams,
    ExperimentKind,
    FeatureSchema,
    PopulationConfig,
    SampleKind,
)
from churnrnn.settings import ExperimentConfig, RuntimeSettings
from churnrnn.synth import calibrate_prevalence, generate_population, write_population
from churnrnn.timeseries import read_series

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _date(value: str) -> dt.date:
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {value!r}") from None


def _dates(value: str) -> List[dt.date]:
    return [_date(v) for v in value.split(",") if v]


def _ints(value: str) -> List[int]:
    return [int(v) for v in value.split(",") if v]


def _cells(value: str) -> List[CellKind]:
    return [CellKind(v) for v in value.split(",") if v]


def _experiment_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Flags that were given, as nested ExperimentConfig values."""
    overrides: Dict[str, Any] = {}
    trainer: Dict[str, Any] = {}
    for flag, key in (
        ("output_dir", "output_dir"),
        ("seeds", "seeds"),
        ("cells", "cells"),
        ("threshold", "threshold"),
        ("t", "t"),
        ("t0_values", "t0_values"),
        ("t_prime_values", "t_prime_values"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for flag in ("n_epochs", "batch_size", "alpha"):
        value = getattr(args, flag, None)
        if value is not None:
            trainer[flag] = value
    if trainer:
        overrides["trainer"] = trainer
    return overrides


def _load_experiment(
    args: argparse.Namespace, kind: Optional[ExperimentKind] = None
) -> ExperimentConfig:
    overrides = _experiment_overrides(args)
    if kind is not None:
        overrides["kind"] = kind
    return ExperimentConfig.load(args.config, **overrides)


def cmd_generate(args: argparse.Namespace, runtime: RuntimeSettings) -> None:
    config = PopulationConfig.from_yaml(args.population).override(
        seed=args.seed, player_count=args.players
    )
    schema = FeatureSchema.canonical()
    histories = generate_population(config, schema, runtime.n_jobs)
    write_population(histories, args.out, schema)


def cmd_label(args: argparse.Namespace, runtime: RuntimeSettings) -> None:
    schema = FeatureSchema.canonical()
    histories = read_series(args.series, args.registrations, schema)
    params = ChurnParams(t_c=args.t_c, t_pred=args.t_pred)
    write_csv(label_histories(histories, params, schema), args.out)
    logger.info(f"Wrote labels of {len(histories)} players to {args.out}")


def cmd_build_dataset(args: argparse.Namespace, runtime: RuntimeSettings) -> None:
    config = _load_experiment(args)
    histories = load_histories(config, runtime.n_jobs)
    build = build_learning_set if args.set == SampleKind.LEARNING else build_test_set
    t = args.at or config.t
    sample_set = build(
        histories, t, config.eligibility, config.churn, config.feature_schema
    )
    write_sample_set(
        sample_set, args.out, config.feature_schema, config.eligibility, config.churn
    )
    logger.info(f"Wrote {len(sample_set)} {args.set.value} samples to {args.out}")


def cmd_train(args: argparse.Namespace, runtime: RuntimeSettings) -> None:
    config = _load_experiment(args)
    sample_set, _ = read_sample_set(args.samples)
    if sample_set.kind != SampleKind.LEARNING:
        raise ConfigError(f"{args.samples} holds a {sample_set.kind.value} set")
    history = TrainingHistory()
    params = train(
        config.architecture_for(args.cell),
        sample_set,
        config.trainer_for(args.seed),
        history,
    )
    save_model(params, args.out)
    if args.log:
        write_csv(history.to_frame(), args.log)


def cmd_evaluate(args: argparse.Namespace, runtime: RuntimeSettings) -> None:
    params = load_model(args.model)
    sample_set, _ = read_sample_set(args.samples)
    report = evaluate(params, sample_set, args.threshold, params.seed)
    lines = reports_to_records([report])
    if args.out:
        with atomic_open(args.out) as f:
            f.write("\n".join(lines) + "\n")
    print(lines[0])


Command = Callable[[argparse.Namespace, RuntimeSettings], None]


def cmd_run(kind: ExperimentKind) -> Command:
    def run(args: argparse.Namespace, runtime: RuntimeSettings) -> None:
        config = _load_experiment(args, kind)
        result = run_experiment(config, n_jobs=args.n_jobs or runtime.n_jobs)
        if isinstance(result, pd.DataFrame):
            print(result.to_string(index=False))
        logger.info(f"Results written to {config.output_dir}")

    return run


def cmd_calibrate(args: argparse.Namespace, runtime: RuntimeSettings) -> None:
    config = PopulationConfig.from_yaml(args.population)
    eligibility = EligibilityParams(t0=args.t0, t_pred=args.t_pred)
    churn = ChurnParams(t_c=args.t_c, t_pred=args.t_pred)
    calibrated = calibrate_prevalence(
        config,
        args.target,
        args.at,
        eligibility,
        churn,
        tolerance=args.tolerance,
        sample_size=args.sample_size,
        n_jobs=runtime.n_jobs,
    )
    calibrated.to_yaml(args.out)
    logger.info(f"Wrote calibrated population config to {args.out}")


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Experiment YAML file")
    parser.add_argument("--output-dir", type=Path)
    parser.add_argument("--seeds", type=_ints, help="Comma-separated seeds")
    parser.add_argument("--cells", type=_cells, help="Comma-separated: GRU,LSTM,nBRC")
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--t", type=_date, help="Reference date t")
    parser.add_argument("--t0-values", type=_dates)
    parser.add_argument("--t-prime-values", type=_dates)
    parser.add_argument("--n-epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--alpha", type=float)


def _add_churn_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--t-c", type=int, default=ChurnParams().t_c)
    parser.add_argument("--t-pred", type=int, default=ChurnParams().t_pred)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="churnrnn", description="Churn prediction with recurrent networks"
    )
    parser.add_argument("--log-level", help="Overrides CHURNRNN_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Generate a synthetic population")
    p.add_argument("--population", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--players", type=int, dest="players")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("label", help="Churn variable and indicator per player-day")
    p.add_argument("--series", type=Path, required=True)
    p.add_argument("--registrations", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_churn_flags(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("build-dataset", help="Write a learning or test set")
    _add_experiment_flags(p)
    p.add_argument("--set", type=SampleKind, default=SampleKind.LEARNING)
    p.add_argument("--at", type=_date, help="Date of the set, defaults to t")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="Train one network on a learning set file")
    _add_experiment_flags(p)
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--cell", type=CellKind, default=CellKind.LSTM)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--log", type=Path, help="Training history CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Score a model file on a sample set file")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    for name, kind in (
        ("run-standard", ExperimentKind.STANDARD),
        ("run-sweep-t0", ExperimentKind.SWEEP_T0),
        ("run-time-robustness", ExperimentKind.TIME_ROBUSTNESS),
    ):
        p = sub.add_parser(name, help=f"Run the {kind.value} experiment")
        _add_experiment_flags(p)
        p.add_argument("--n-jobs", type=int)
        p.set_defaults(func=cmd_run(kind))

    p = sub.add_parser("calibrate", help="Tune churn hazards to a target prevalence")
    p.add_argument("--population", type=Path, required=True)
    p.add_argument("--target", type=float, default=0.22)
    p.add_argument("--at", type=_date, required=True, help="Test-set date t")
    p.add_argument("--t0", type=_date, required=True)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--sample-size", type=int, default=5000)
    p.add_argument("--out", type=Path, required=True)
    _add_churn_flags(p)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        runtime = RuntimeSettings()
        if args.log_level:
            runtime = runtime.model_copy(update={"log_level": args.log_level})
        logging.basicConfig(
            stream=sys.stderr, level=runtime.log_level.upper(), format=LOG_FORMAT
        )
        args.func(args, runtime)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return ExitCode.CONFIG
    except ChurnRNNError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return ExitCode.UNEXPECTED
    return ExitCode.OK
