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

from enum import IntEnum
from typing import Optional


class ExitCode(IntEnum):
    OK = 0
    UNEXPECTED = 1
    CONFIG = 3
    DATA_COVERAGE = 4
    NUMERIC = 5


class ChurnRNNError(Exception):
    """Base class for every error raised by the churn pipeline."""

    exit_code: ExitCode = ExitCode.UNEXPECTED


class SchemaError(ChurnRNNError, ValueError):
    exit_code = ExitCode.CONFIG


class ConfigError(ChurnRNNError, ValueError):
    exit_code = ExitCode.CONFIG


class DateRangeError(ChurnRNNError, IndexError):
    """A date or day index falls outside the data a history holds."""

    exit_code = ExitCode.DATA_COVERAGE


class InsufficientFutureError(DateRangeError):
    """A label horizon extends past the end of the series."""


class CoverageError(ChurnRNNError, ValueError):
    """The data source does not span the dates an experiment needs."""

    exit_code = ExitCode.DATA_COVERAGE


class EmptySetError(ChurnRNNError, ValueError):
    exit_code = ExitCode.DATA_COVERAGE


class EmptyEvaluationError(EmptySetError):
    pass


class NumericError(ChurnRNNError, ArithmeticError):
    """Non-finite value met during training or evaluation."""

    exit_code = ExitCode.NUMERIC

    def __init__(
        self,
        message: str,
        *,
        layer: Optional[str] = None,
        step: Optional[int] = None,
        tensor: Optional[str] = None,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
    ) -> None:
        self.layer = layer
        self.step = step
        self.tensor = tensor
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)

    def located(self, *, epoch: int, batch: int) -> NumericError:
        """Copy of this error tagged with the training position it came from."""
        return NumericError(
            f"{self.args[0]} (epoch {epoch}, batch {batch})",
            layer=self.layer,
            step=self.step,
            tensor=self.tensor,
            epoch=epoch,
            batch=batch,
        )


class CalibrationError(ChurnRNNError, RuntimeError):
    exit_code = ExitCode.NUMERIC
