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

import json
import logging
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from churnrnn.dataset import SampleSet
from churnrnn.errors import EmptyEvaluationError
from churnrnn.rnn import NetworkParameters, predict_proba

logger = logging.getLogger(__name__)

METRIC_NAMES = ("precision", "recall", "accuracy")
DEFAULT_THRESHOLD: float = 0.5


class ConfusionCounts(BaseModel):
    """Churn is the positive class."""

    model_config = ConfigDict(frozen=True)

    tp: int = Field(default=0, ge=0)
    fp: int = Field(default=0, ge=0)
    tn: int = Field(default=0, ge=0)
    fn: int = Field(default=0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class MetricsReport(BaseModel):
    """Metrics of one evaluation; None marks an undefined ratio."""

    precision: Optional[float] = None
    recall: Optional[float] = None
    accuracy: Optional[float] = None
    threshold: float = DEFAULT_THRESHOLD
    seed: Optional[int] = None
    counts: Optional[ConfusionCounts] = None
    tags: Dict[str, Any] = {}

    def metric(self, name: str) -> Optional[float]:
        value: Optional[float] = getattr(self, name)
        return value


class MetricSummary(BaseModel):
    mean: Optional[float] = None
    std: Optional[float] = None
    n: int = 0
    skipped: int = 0

    def format(self) -> str:
        if self.mean is None:
            return "n/a"
        std = "n/a" if self.std is None else f"{self.std:.6f}"
        return f"{self.mean:.6f} ± {std}"


def confusion(
    probabilities: Sequence[float] | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
) -> ConfusionCounts:
    probs = np.asarray(probabilities, dtype=np.float64)
    truth = np.asarray(labels)
    if probs.shape != truth.shape:
        raise ValueError(
            f"{probs.size} probabilities but {truth.size} labels; lengths must match"
        )
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"Threshold must lie in (0, 1), got {threshold}")
    predicted = probs >= threshold
    actual = truth == 1
    return ConfusionCounts(
        tp=int(np.sum(predicted & actual)),
        fp=int(np.sum(predicted & ~actual)),
        tn=int(np.sum(~predicted & ~actual)),
        fn=int(np.sum(~predicted & actual)),
    )


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def compute_metrics(
    counts: ConfusionCounts,
    threshold: float = DEFAULT_THRESHOLD,
    seed: Optional[int] = None,
) -> MetricsReport:
    if not counts.total:
        raise EmptyEvaluationError("No samples were evaluated")
    return MetricsReport(
        precision=_ratio(counts.tp, counts.tp + counts.fp),
        recall=_ratio(counts.tp, counts.tp + counts.fn),
        accuracy=_ratio(counts.tp + counts.tn, counts.total),
        threshold=threshold,
        seed=seed,
        counts=counts,
    )


def evaluate(
    params: NetworkParameters,
    sample_set: SampleSet,
    threshold: float = DEFAULT_THRESHOLD,
    seed: Optional[int] = None,
    batch_size: int = 256,
) -> MetricsReport:
    """Metrics of `params` on every sample of the set."""
    if not len(sample_set):
        raise EmptyEvaluationError(f"{sample_set.kind.value} set is empty")
    probs = predict_proba(params, sample_set.trajectories(), batch_size)
    counts = confusion(probs, sample_set.labels().astype(int), threshold)
    return compute_metrics(counts, threshold, seed)


def aggregate_over_seeds(
    reports: Sequence[MetricsReport],
) -> Dict[str, MetricSummary]:
    """Mean and sample std per metric, skipping undefined values."""
    thresholds = {r.threshold for r in reports}
    if len(thresholds) > 1:
        raise ValueError(f"Reports use different thresholds: {sorted(thresholds)}")
    out: Dict[str, MetricSummary] = {}
    for name in METRIC_NAMES:
        values = [v for v in (r.metric(name) for r in reports) if v is not None]
        skipped = len(reports) - len(values)
        if len(values) < 2:
            logger.warning(
                f"Only {len(values)} defined {name} value(s) over {len(reports)} "
                "reports; std is undefined"
            )
        out[name] = MetricSummary(
            mean=float(np.mean(values)) if values else None,
            std=float(np.std(values, ddof=1)) if len(values) >= 2 else None,
            n=len(values),
            skipped=skipped,
        )
    return out


def format_table(
    rows: Mapping[str, Mapping[str, MetricSummary]], key_name: str = "cell"
) -> str:
    """Plain-text table, one row per key, `mean ± std` per metric."""
    header = [key_name, *METRIC_NAMES]
    body = [
        [str(key), *(summary[m].format() for m in METRIC_NAMES)]
        for key, summary in rows.items()
    ]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def line(cells: List[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, body)])


def summary_records(
    rows: Mapping[str, Mapping[str, MetricSummary]], key_name: str = "cell"
) -> List[Dict[str, Any]]:
    """Flat records with `<metric>_mean`, `<metric>_std`, `<metric>` columns."""
    records = []
    for key, summary in rows.items():
        record: Dict[str, Any] = {key_name: key}
        for m in METRIC_NAMES:
            record[f"{m}_mean"] = summary[m].mean
            record[f"{m}_std"] = summary[m].std
            record[m] = summary[m].format()
        records.append(record)
    return records


def reports_to_records(reports: Iterable[MetricsReport]) -> List[str]:
    """One JSON line per report."""
    return [r.model_dump_json() for r in reports]


def records_to_reports(lines: Iterable[str]) -> List[MetricsReport]:
    return [
        MetricsReport.model_validate(json.loads(line)) for line in lines if line.strip()
    ]
