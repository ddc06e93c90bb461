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

"""Empirical loss, RMSprop and the mini-batch training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from churnrnn.dataset import SampleSet
from churnrnn.errors import EmptySetError, NumericError
from churnrnn.losses import bce
from churnrnn.rnn import (
    GradientSet,
    NetworkParameters,
    TrajectoryLike,
    init_parameters,
    loss_and_gradient,
    predict_proba,
)
from churnrnn.schema import Architecture, TrainerConfig
from churnrnn.timeseries import Trajectory

__all__ = [
    "OptimizerState",
    "TrainingHistory",
    "batch_gradient",
    "bce",
    "empirical_loss",
    "fit_standardization",
    "rmsprop_step",
    "train",
]

logger = logging.getLogger(__name__)


def empirical_loss(
    params: NetworkParameters,
    sample_set: SampleSet,
    prob_clamp: float = 1e-12,
    batch_size: int = 256,
) -> float:
    """Mean binary cross-entropy over every sample of the set."""
    if not len(sample_set):
        raise EmptySetError(f"Empirical loss over empty {sample_set.kind.value} set")
    probs = predict_proba(params, sample_set.trajectories(), batch_size)
    return float(np.mean(bce(sample_set.labels(), probs, prob_clamp)))


@dataclass
class OptimizerState:
    """Running mean of squared gradients per tensor."""

    square_avg: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParameters) -> OptimizerState:
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})


def rmsprop_step(
    state: OptimizerState,
    params: NetworkParameters,
    grads: GradientSet,
    config: TrainerConfig,
) -> Tuple[NetworkParameters, OptimizerState]:
    for name, g in grads.tensors.items():
        if not np.isfinite(g).all():
            raise NumericError(f"Non-finite gradient for {name}", tensor=name)
    updated = params.copy()
    square_avg: Dict[str, np.ndarray] = {}
    for name, w in updated.tensors.items():
        g = grads.tensors[name]
        s = config.decay * state.square_avg[name] + (1.0 - config.decay) * g * g
        w -= config.alpha * g / (np.sqrt(s) + config.epsilon)
        square_avg[name] = s
    return updated, OptimizerState(square_avg, state.step + 1)


def batch_gradient(
    params: NetworkParameters,
    trajectories: Sequence[TrajectoryLike],
    labels: np.ndarray,
    prob_clamp: float = 1e-12,
) -> Tuple[float, GradientSet]:
    """Mean loss and mean per-sample gradient of one mini-batch."""
    return loss_and_gradient(params, trajectories, labels, prob_clamp)


def fit_standardization(
    trajectories: Sequence[TrajectoryLike], input_dim: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std over every day of every trajectory.

    Constant features keep scale 1.
    """
    total = np.zeros(input_dim)
    total_sq = np.zeros(input_dim)
    count = 0
    for t in trajectories:
        values = t.values if isinstance(t, Trajectory) else np.asarray(t)
        total += values.sum(axis=0)
        total_sq += (values * values).sum(axis=0)
        count += values.shape[0]
    if not count:
        return np.zeros(input_dim), np.ones(input_dim)
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    return mean, np.where(std > 1e-12, std, 1.0)


@dataclass
class TrainingHistory:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def record(self, epoch: int, loss: float, seconds: float) -> None:
        self.rows.append({"epoch": epoch, "loss": loss, "seconds": seconds})

    @property
    def losses(self) -> List[float]:
        return [row["loss"] for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["epoch", "loss", "seconds"])


def train(
    arch: Architecture,
    sample_set: SampleSet,
    config: TrainerConfig,
    history: Optional[TrainingHistory] = None,
) -> NetworkParameters:
    """Minimise the empirical loss of `sample_set` with mini-batch RMSprop.

    Each epoch visits the samples in a fresh permutation drawn from the
    seed; the last batch of an epoch may be short.
    """
    if not len(sample_set):
        raise EmptySetError(f"Cannot train on an empty {sample_set.kind.value} set")
    trajectories = sample_set.trajectories()
    labels = sample_set.labels()
    params = init_parameters(arch, config.seed)
    if config.standardize:
        params = params.with_standardization(
            *fit_standardization(trajectories, arch.input_dim)
        )
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng([config.seed, 1])
    history = history if history is not None else TrainingHistory()
    n = len(trajectories)

    for epoch in range(1, config.n_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        weighted_loss = 0.0
        for batch, start in enumerate(range(0, n, config.batch_size), start=1):
            index = order[start : start + config.batch_size]
            try:
                loss, grads = batch_gradient(
                    params,
                    [trajectories[i] for i in index],
                    labels[index],
                    config.prob_clamp,
                )
                params, state = rmsprop_step(state, params, grads, config)
            except NumericError as e:
                raise e.located(epoch=epoch, batch=batch) from e
            weighted_loss += loss * len(index)
            logger.debug(f"Epoch {epoch} batch {batch}: loss {loss:.6f}")
        if config.track_empirical_loss:
            epoch_loss = empirical_loss(params, sample_set, config.prob_clamp)
        else:
            epoch_loss = weighted_loss / n
        seconds = time.perf_counter() - started
        history.record(epoch, epoch_loss, seconds)
        logger.info(
            f"Epoch {epoch}/{config.n_epochs}: loss {epoch_loss:.6f} ({seconds:.1f}s)"
        )
    return params
