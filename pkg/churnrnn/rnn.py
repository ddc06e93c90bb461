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

"""Two-layer recurrent classifier with a sigmoid output and exact BPTT.

Cell recurrences, for input x and previous state h (and memory c):

GRU
    z = s(W_z x + U_z h + b_z), r = s(W_r x + U_r h + b_r)
    g = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * g
LSTM
    i, f, o = s(W_k x + U_k h + b_k), g = tanh(W_g x + U_g h + b_g)
    c' = f * c + i * g, h' = o * tanh(c')
nBRC
    a = 1 + tanh(W_a x + U_a h + b_a), c = s(W_c x + U_c h + b_c)
    h' = c * h + (1 - c) * tanh(W_h x + b_h + a * h)

W_* act on the input, U_* on the recurrent state. Batches are left-padded so
every sequence ends on the last step; padded steps leave the state untouched
and receive no gradient.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from churnrnn.errors import ConfigError, NumericError
from churnrnn.files import atomic_open
from churnrnn.losses import DEFAULT_PROB_CLAMP, bce, bce_logit_gradient
from churnrnn.schema import Architecture, CellKind
from churnrnn.timeseries import Trajectory

logger = logging.getLogger(__name__)

MODEL_FILE_FORMAT: str = "churnrnn-model"
MODEL_FILE_VERSION: int = 1
LAYERS: Tuple[str, str] = ("l1", "l2")

GATES: Dict[CellKind, Tuple[str, ...]] = {
    CellKind.GRU: ("z", "r", "h"),
    CellKind.LSTM: ("i", "f", "o", "g"),
    CellKind.NBRC: ("a", "c", "h"),
}
# nBRC's candidate is driven by a * h elementwise, not by a recurrent matrix.
RECURRENT_GATES: Dict[CellKind, Tuple[str, ...]] = {
    CellKind.GRU: ("z", "r", "h"),
    CellKind.LSTM: ("i", "f", "o", "g"),
    CellKind.NBRC: ("a", "c"),
}

Tensors = Dict[str, np.ndarray]
TrajectoryLike = Union[Trajectory, np.ndarray]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def layer_shapes(
    kind: CellKind, input_dim: int, hidden: int
) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for gate in GATES[kind]:
        shapes[f"W_{gate}"] = (hidden, input_dim)
        if gate in RECURRENT_GATES[kind]:
            shapes[f"U_{gate}"] = (hidden, hidden)
        shapes[f"b_{gate}"] = (hidden,)
    return shapes


def tensor_shapes(arch: Architecture) -> Dict[str, Tuple[int, ...]]:
    """Every trainable tensor, in the declared (serialization) order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer, (fan_in, hidden) in zip(
        LAYERS, ((arch.input_dim, arch.n), (arch.n, arch.m))
    ):
        for name, shape in layer_shapes(arch.cell_kind, fan_in, hidden).items():
            shapes[f"{layer}.{name}"] = shape
    shapes["out.w"] = (arch.m,)
    shapes["out.b"] = ()
    return shapes


@dataclass
class NetworkParameters:
    """Weights of one network plus a fixed per-feature input standardisation."""

    architecture: Architecture
    tensors: Tensors
    input_shift: np.ndarray
    input_scale: np.ndarray
    seed: Optional[int] = None

    def layer(self, layer: str) -> Tensors:
        prefix = f"{layer}."
        return {
            k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)
        }

    def copy(self) -> NetworkParameters:
        return NetworkParameters(
            architecture=self.architecture,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            input_shift=self.input_shift.copy(),
            input_scale=self.input_scale.copy(),
            seed=self.seed,
        )

    def with_standardization(
        self, shift: np.ndarray, scale: np.ndarray
    ) -> NetworkParameters:
        out = self.copy()
        out.input_shift = np.asarray(shift, dtype=np.float64).copy()
        out.input_scale = np.asarray(scale, dtype=np.float64).copy()
        return out


@dataclass
class GradientSet:
    tensors: Tensors

    @classmethod
    def zeros_like(cls, params: NetworkParameters) -> GradientSet:
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})

    def add(self, other: GradientSet) -> None:
        for k, v in other.tensors.items():
            self.tensors[k] += v


@dataclass
class LayerState:
    h: np.ndarray
    c: Optional[np.ndarray] = None


def init_parameters(arch: Architecture, seed: int) -> NetworkParameters:
    """Glorot-uniform weights, zero biases, LSTM forget bias 1."""
    rng = np.random.default_rng(seed)
    tensors: Tensors = {}
    for name, shape in tensor_shapes(arch).items():
        kind = name.split(".")[-1]
        if kind.startswith(("W_", "U_")):
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        elif name == "out.w":
            limit = np.sqrt(6.0 / (shape[0] + 1))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    if arch.cell_kind == CellKind.LSTM:
        for layer in LAYERS:
            tensors[f"{layer}.b_f"][:] = 1.0
    return NetworkParameters(
        architecture=arch,
        tensors=tensors,
        input_shift=np.zeros(arch.input_dim),
        input_scale=np.ones(arch.input_dim),
        seed=seed,
    )


# --- single steps -----------------------------------------------------------

StepCache = Tuple[np.ndarray, ...]


def _pre(p: Tensors, gate: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return x @ p[f"W_{gate}"].T + h @ p[f"U_{gate}"].T + p[f"b_{gate}"]


def _gru_forward(
    p: Tensors, x: np.ndarray, h: np.ndarray, c: Optional[np.ndarray]
) -> Tuple[np.ndarray, Optional[np.ndarray], StepCache]:
    z = _sigmoid(_pre(p, "z", x, h))
    r = _sigmoid(_pre(p, "r", x, h))
    rh = r * h
    g = np.tanh(_pre(p, "h", x, rh))
    return (1.0 - z) * h + z * g, None, (x, h, z, r, rh, g)


def _lstm_forward(
    p: Tensors, x: np.ndarray, h: np.ndarray, c: Optional[np.ndarray]
) -> Tuple[np.ndarray, Optional[np.ndarray], StepCache]:
    assert c is not None
    i = _sigmoid(_pre(p, "i", x, h))
    f = _sigmoid(_pre(p, "f", x, h))
    o = _sigmoid(_pre(p, "o", x, h))
    g = np.tanh(_pre(p, "g", x, h))
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (x, h, c, i, f, o, g, tc)


def _nbrc_forward(
    p: Tensors, x: np.ndarray, h: np.ndarray, c: Optional[np.ndarray]
) -> Tuple[np.ndarray, Optional[np.ndarray], StepCache]:
    a = 1.0 + np.tanh(_pre(p, "a", x, h))
    gate = _sigmoid(_pre(p, "c", x, h))
    g = np.tanh(x @ p["W_h"].T + p["b_h"] + a * h)
    return gate * h + (1.0 - gate) * g, None, (x, h, a, gate, g)


def _accumulate(
    grads: Tensors, gate: str, da: np.ndarray, x: np.ndarray, h: Optional[np.ndarray]
) -> None:
    grads[f"W_{gate}"] += da.T @ x
    if h is not None:
        grads[f"U_{gate}"] += da.T @ h
    grads[f"b_{gate}"] += da.sum(axis=0)


def _gru_backward(
    p: Tensors,
    cache: StepCache,
    dh: np.ndarray,
    dc: Optional[np.ndarray],
    grads: Tensors,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    x, h, z, r, rh, g = cache
    da_z = dh * (g - h) * z * (1.0 - z)
    da_h = dh * z * (1.0 - g * g)
    drh = da_h @ p["U_h"]
    da_r = drh * h * r * (1.0 - r)
    _accumulate(grads, "z", da_z, x, h)
    _accumulate(grads, "r", da_r, x, h)
    _accumulate(grads, "h", da_h, x, rh)
    dh_prev = dh * (1.0 - z) + drh * r + da_z @ p["U_z"] + da_r @ p["U_r"]
    dx = da_z @ p["W_z"] + da_r @ p["W_r"] + da_h @ p["W_h"]
    return dx, dh_prev, None


def _lstm_backward(
    p: Tensors,
    cache: StepCache,
    dh: np.ndarray,
    dc: Optional[np.ndarray],
    grads: Tensors,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    assert dc is not None
    x, h, c, i, f, o, g, tc = cache
    dc_total = dc + dh * o * (1.0 - tc * tc)
    pre_grads = {
        "i": dc_total * g * i * (1.0 - i),
        "f": dc_total * c * f * (1.0 - f),
        "o": dh * tc * o * (1.0 - o),
        "g": dc_total * i * (1.0 - g * g),
    }
    dh_prev = np.zeros_like(h)
    dx = np.zeros_like(x)
    for gate, da in pre_grads.items():
        _accumulate(grads, gate, da, x, h)
        dh_prev += da @ p[f"U_{gate}"]
        dx += da @ p[f"W_{gate}"]
    return dx, dh_prev, dc_total * f


def _nbrc_backward(
    p: Tensors,
    cache: StepCache,
    dh: np.ndarray,
    dc: Optional[np.ndarray],
    grads: Tensors,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    x, h, a, gate, g = cache
    da_c = dh * (h - g) * gate * (1.0 - gate)
    da_h = dh * (1.0 - gate) * (1.0 - g * g)
    da_a = da_h * h * (1.0 - (a - 1.0) ** 2)
    _accumulate(grads, "a", da_a, x, h)
    _accumulate(grads, "c", da_c, x, h)
    _accumulate(grads, "h", da_h, x, None)
    dh_prev = dh * gate + da_h * a + da_a @ p["U_a"] + da_c @ p["U_c"]
    dx = da_a @ p["W_a"] + da_c @ p["W_c"] + da_h @ p["W_h"]
    return dx, dh_prev, None


StepForward = Callable[
    [Tensors, np.ndarray, np.ndarray, Optional[np.ndarray]],
    Tuple[np.ndarray, Optional[np.ndarray], StepCache],
]
StepBackward = Callable[
    [Tensors, StepCache, np.ndarray, Optional[np.ndarray], Tensors],
    Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]],
]

STEP_FORWARD: Dict[CellKind, StepForward] = {
    CellKind.GRU: _gru_forward,
    CellKind.LSTM: _lstm_forward,
    CellKind.NBRC: _nbrc_forward,
}
STEP_BACKWARD: Dict[CellKind, StepBackward] = {
    CellKind.GRU: _gru_backward,
    CellKind.LSTM: _lstm_backward,
    CellKind.NBRC: _nbrc_backward,
}


def cell_step(
    kind: CellKind, layer_params: Tensors, x: np.ndarray, state: LayerState
) -> LayerState:
    """One recurrence step; x is (input_dim,) or (batch, input_dim)."""
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    h = np.atleast_2d(state.h)
    c = None if state.c is None else np.atleast_2d(state.c)
    if kind == CellKind.LSTM and c is None:
        c = np.zeros_like(h)
    h_new, c_new, _ = STEP_FORWARD[kind](layer_params, x2, h, c)
    if not np.isfinite(h_new).all() or (
        c_new is not None and not np.isfinite(c_new).all()
    ):
        raise NumericError(f"Non-finite {kind.value} state", layer=kind.value)
    if squeeze:
        return LayerState(h_new[0], None if c_new is None else c_new[0])
    return LayerState(h_new, c_new)


# --- sequences --------------------------------------------------------------


def _values(trajectory: TrajectoryLike) -> np.ndarray:
    return trajectory.values if isinstance(trajectory, Trajectory) else trajectory


def pack_trajectories(
    trajectories: Sequence[TrajectoryLike],
) -> Tuple[np.ndarray, np.ndarray]:
    """Left-pad to (time, batch, features) with a (time, batch) validity mask."""
    arrays = [np.asarray(_values(t), dtype=np.float64) for t in trajectories]
    if not arrays:
        raise ValueError("Cannot pack an empty batch")
    lengths = [a.shape[0] for a in arrays]
    if min(lengths) < 1:
        raise ValueError("Trajectories need at least one time step")
    steps, width = max(lengths), arrays[0].shape[1]
    xs = np.zeros((steps, len(arrays), width))
    mask = np.zeros((steps, len(arrays)), dtype=bool)
    for b, a in enumerate(arrays):
        if a.shape[1] != width:
            raise ValueError("Trajectories disagree on the feature dimension")
        xs[steps - a.shape[0] :, b] = a
        mask[steps - a.shape[0] :, b] = True
    return xs, mask


@dataclass
class _LayerTrace:
    outputs: np.ndarray
    caches: List[StepCache]


@dataclass
class _ForwardTrace:
    mask: np.ndarray
    layers: List[_LayerTrace]
    probs: np.ndarray


def _check_finite(values: np.ndarray, layer: str) -> None:
    if np.isfinite(values).all():
        return
    bad = ~np.isfinite(values).reshape(values.shape[0], -1).all(axis=1)
    step = int(np.flatnonzero(bad)[0])
    raise NumericError(
        f"Non-finite hidden state in {layer} at step {step}", layer=layer, step=step
    )


def _run_layer(
    kind: CellKind, p: Tensors, xs: np.ndarray, mask: np.ndarray, hidden: int, name: str
) -> _LayerTrace:
    steps, batch = mask.shape
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden)) if kind == CellKind.LSTM else None
    outputs = np.empty((steps, batch, hidden))
    caches: List[StepCache] = []
    step = STEP_FORWARD[kind]
    for t in range(steps):
        h_new, c_new, cache = step(p, xs[t], h, c)
        m = mask[t][:, None]
        h = np.where(m, h_new, h)
        if c is not None and c_new is not None:
            c = np.where(m, c_new, c)
        outputs[t] = h
        caches.append(cache)
    _check_finite(outputs, name)
    return _LayerTrace(outputs, caches)


def _forward(
    params: NetworkParameters, xs: np.ndarray, mask: np.ndarray
) -> _ForwardTrace:
    arch = params.architecture
    if xs.shape[-1] != arch.input_dim:
        raise ValueError(f"Expected {arch.input_dim} features, got {xs.shape[-1]}")
    inputs = (xs - params.input_shift) / params.input_scale
    layers = []
    for name, hidden in zip(LAYERS, (arch.n, arch.m)):
        trace = _run_layer(
            arch.cell_kind, params.layer(name), inputs, mask, hidden, name
        )
        layers.append(trace)
        inputs = trace.outputs
    logits = inputs[-1] @ params.tensors["out.w"] + params.tensors["out.b"]
    return _ForwardTrace(mask, layers, _sigmoid(logits))


def _backprop_layer(
    kind: CellKind,
    p: Tensors,
    trace: _LayerTrace,
    mask: np.ndarray,
    d_outputs: np.ndarray,
    grads: Tensors,
) -> np.ndarray:
    steps, batch = mask.shape
    hidden = d_outputs.shape[-1]
    dh = np.zeros((batch, hidden))
    dc = np.zeros((batch, hidden)) if kind == CellKind.LSTM else None
    d_inputs: List[np.ndarray] = [np.empty(0)] * steps
    step = STEP_BACKWARD[kind]
    for t in reversed(range(steps)):
        dh = dh + d_outputs[t]
        m = mask[t][:, None]
        dc_step = None if dc is None else dc * m
        dx, dh_prev, dc_prev = step(p, trace.caches[t], dh * m, dc_step, grads)
        dh = dh_prev + np.where(m, 0.0, dh)
        if dc is not None and dc_prev is not None:
            dc = dc_prev + np.where(m, 0.0, dc)
        d_inputs[t] = dx
    return np.stack(d_inputs)


def _backward(
    params: NetworkParameters, trace: _ForwardTrace, d_logits: np.ndarray
) -> GradientSet:
    """Gradients of sum_b d_logits[b] * z_b with respect to every tensor."""
    arch = params.architecture
    grads = GradientSet.zeros_like(params)
    final = trace.layers[-1].outputs[-1]
    grads.tensors["out.w"] += final.T @ d_logits
    grads.tensors["out.b"] += d_logits.sum()

    d_outputs = np.zeros_like(trace.layers[-1].outputs)
    d_outputs[-1] = np.outer(d_logits, params.tensors["out.w"])
    for index in reversed(range(len(LAYERS))):
        name = LAYERS[index]
        layer_grads = {
            k[len(name) + 1 :]: v
            for k, v in grads.tensors.items()
            if k.startswith(f"{name}.")
        }
        d_outputs = _backprop_layer(
            arch.cell_kind,
            params.layer(name),
            trace.layers[index],
            trace.mask,
            d_outputs,
            layer_grads,
        )
    for name, g in grads.tensors.items():
        if not np.isfinite(g).all():
            raise NumericError(f"Non-finite gradient for {name}", tensor=name)
    return grads


def _probabilities(trace: _ForwardTrace) -> np.ndarray:
    """Output probabilities kept strictly inside (0, 1)."""
    return np.clip(trace.probs, DEFAULT_PROB_CLAMP, 1.0 - DEFAULT_PROB_CLAMP)


def forward(params: NetworkParameters, trajectory: TrajectoryLike) -> float:
    """Churn probability of one trajectory."""
    xs, mask = pack_trajectories([trajectory])
    return float(_probabilities(_forward(params, xs, mask))[0])


def predict_proba(
    params: NetworkParameters,
    trajectories: Sequence[TrajectoryLike],
    batch_size: int = 256,
) -> np.ndarray:
    out = np.empty(len(trajectories))
    for start in range(0, len(trajectories), batch_size):
        chunk = trajectories[start : start + batch_size]
        xs, mask = pack_trajectories(chunk)
        out[start : start + len(chunk)] = _probabilities(_forward(params, xs, mask))
    return out


def loss_and_gradient(
    params: NetworkParameters,
    trajectories: Sequence[TrajectoryLike],
    labels: np.ndarray,
    prob_clamp: float = DEFAULT_PROB_CLAMP,
) -> Tuple[float, GradientSet]:
    """Mean BCE over a batch and its exact gradient, by full unrolled BPTT."""
    xs, mask = pack_trajectories(trajectories)
    trace = _forward(params, xs, mask)
    labels = np.asarray(labels, dtype=np.float64)
    losses = np.asarray(bce(labels, trace.probs, prob_clamp))
    d_logits = bce_logit_gradient(labels, trace.probs, prob_clamp) / len(labels)
    return float(losses.mean()), _backward(params, trace, d_logits)


def backward(
    params: NetworkParameters,
    trajectory: TrajectoryLike,
    label: int,
    prob_clamp: float = DEFAULT_PROB_CLAMP,
) -> Tuple[float, GradientSet]:
    return loss_and_gradient(params, [trajectory], np.array([label]), prob_clamp)


# --- model file -------------------------------------------------------------


def save_model(params: NetworkParameters, path: str | Path) -> None:
    """JSON header line, then float64 little-endian tensors in declared order."""
    arch = params.architecture
    shapes = tensor_shapes(arch)
    header: Dict[str, Any] = {
        "format": MODEL_FILE_FORMAT,
        "version": MODEL_FILE_VERSION,
        "architecture": arch.model_dump(mode="json"),
        "seed": params.seed,
        "tensors": [[name, list(shape)] for name, shape in shapes.items()],
    }
    with atomic_open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode("utf-8"))
        f.write(params.input_shift.astype("<f8").tobytes())
        f.write(params.input_scale.astype("<f8").tobytes())
        for name in shapes:
            f.write(params.tensors[name].astype("<f8").tobytes())


def load_model(path: str | Path) -> NetworkParameters:
    with open(path, "rb") as f:
        first = f.readline()
        payload = f.read()
    try:
        header = json.loads(first.decode("utf-8"))
    except ValueError as e:
        raise ConfigError(f"{path} has no model file header") from e
    if not isinstance(header, dict) or header.get("format") != MODEL_FILE_FORMAT:
        raise ConfigError(f"{path} is not a model file")
    if header["version"] > MODEL_FILE_VERSION:
        raise ConfigError(f"Model file version {header['version']} is not supported")
    arch = Architecture.model_validate(header["architecture"])
    if len(payload) % 8:
        raise ConfigError(f"{path} is truncated")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    shapes = [(name, tuple(shape)) for name, shape in header["tensors"]]
    expected = 2 * arch.input_dim + sum(int(np.prod(s)) for _, s in shapes)
    if flat.size != expected:
        raise ConfigError(f"{path} holds {flat.size} values, expected {expected}")
    offset = 2 * arch.input_dim
    tensors: Tensors = {}
    for name, shape in shapes:
        size = int(np.prod(shape))
        tensors[name] = flat[offset : offset + size].reshape(shape).copy()
        offset += size
    return NetworkParameters(
        architecture=arch,
        tensors=tensors,
        input_shift=flat[: arch.input_dim].copy(),
        input_scale=flat[arch.input_dim : 2 * arch.input_dim].copy(),
        seed=header.get("seed"),
    )
