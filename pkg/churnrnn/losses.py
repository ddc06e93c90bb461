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

from typing import Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

DEFAULT_PROB_CLAMP: float = 1e-12


def bce(
    label: ArrayLike, p: ArrayLike, prob_clamp: float = DEFAULT_PROB_CLAMP
) -> ArrayLike:
    """Binary cross-entropy -(y log p + (1 - y) log(1 - p)), elementwise."""
    q = np.clip(p, prob_clamp, 1.0 - prob_clamp)
    out = -(label * np.log(q) + (1.0 - np.asarray(label)) * np.log1p(-q))
    return float(out) if np.ndim(out) == 0 else out


def bce_logit_gradient(
    label: np.ndarray, p: np.ndarray, prob_clamp: float = DEFAULT_PROB_CLAMP
) -> np.ndarray:
    """d bce / d z for p = sigmoid(z); zero where the clamp is active."""
    inside = (p >= prob_clamp) & (p <= 1.0 - prob_clamp)
    return np.where(inside, p - label, 0.0)
