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

# mypy: ignore-errors

import json

import numpy as np
import pytest

from churnrnn.errors import ConfigError, NumericError
from churnrnn.losses import DEFAULT_PROB_CLAMP, bce
from churnrnn.rnn import (
    STEP_FORWARD,
    LayerState,
    backward,
    cell_step,
    forward,
    init_parameters,
    load_model,
    loss_and_gradient,
    predict_proba,
    save_model,
    tensor_shapes,
)
from churnrnn.schema import Architecture, CellKind

CELLS = [CellKind.GRU, CellKind.LSTM, CellKind.NBRC]


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def zero_params(arch):
    params = init_parameters(arch, 0)
    for value in params.tensors.values():
        value[...] = 0.0
    return params


def initial(kind, hidden):
    c = np.zeros(hidden) if kind == CellKind.LSTM else None
    return LayerState(np.zeros(hidden), c)


def test_tensor_inventory():
    shapes = tensor_shapes(Architecture(cell_kind=CellKind.GRU, n=4, m=3))
    assert list(shapes) == [
        "l1.W_z",
        "l1.U_z",
        "l1.b_z",
        "l1.W_r",
        "l1.U_r",
        "l1.b_r",
        "l1.W_h",
        "l1.U_h",
        "l1.b_h",
        "l2.W_z",
        "l2.U_z",
        "l2.b_z",
        "l2.W_r",
        "l2.U_r",
        "l2.b_r",
        "l2.W_h",
        "l2.U_h",
        "l2.b_h",
        "out.w",
        "out.b",
    ]
    assert shapes["l1.W_z"] == (4, 8)
    assert shapes["l2.U_r"] == (3, 3)
    assert shapes["l2.W_h"] == (3, 4)
    assert shapes["out.w"] == (3,)

    nbrc = tensor_shapes(Architecture(cell_kind=CellKind.NBRC, n=4, m=3))
    assert "l1.U_h" not in nbrc
    assert "l1.U_a" in nbrc


def test_initialisation_is_seeded():
    arch = Architecture(cell_kind=CellKind.LSTM, n=5, m=4)
    a, b = init_parameters(arch, 1), init_parameters(arch, 1)
    c = init_parameters(arch, 2)
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
    assert not np.array_equal(a.tensors["l1.W_i"], c.tensors["l1.W_i"])
    np.testing.assert_array_equal(a.tensors["l1.b_f"], np.ones(5))
    np.testing.assert_array_equal(a.tensors["l2.b_i"], np.zeros(4))
    limit = np.sqrt(6.0 / (8 + 5))
    assert np.abs(a.tensors["l1.W_g"]).max() <= limit


@pytest.mark.parametrize("kind", [CellKind.GRU, CellKind.NBRC])
def test_zero_parameters_keep_zero_state(kind):
    params = zero_params(Architecture(cell_kind=kind, n=4, m=3))
    state = cell_step(kind, params.layer("l1"), np.ones(8), initial(kind, 4))
    np.testing.assert_array_equal(state.h, np.zeros(4))


def test_lstm_step_matches_stacked_gates():
    rng = np.random.default_rng(4)
    params = init_parameters(Architecture(cell_kind=CellKind.LSTM, n=5, m=3), 9)
    p = params.layer("l1")
    for gate in "ifog":
        p[f"b_{gate}"] += rng.normal(size=5)
    x, h, c = rng.normal(size=8), rng.normal(size=5), rng.normal(size=5)

    big = np.vstack([np.hstack([p[f"W_{g}"], p[f"U_{g}"]]) for g in "ifog"])
    bias = np.concatenate([p[f"b_{g}"] for g in "ifog"])
    i, f, o, g = np.split(big @ np.concatenate([x, h]) + bias, 4)
    c_new = sigmoid(f) * c + sigmoid(i) * np.tanh(g)
    h_new = sigmoid(o) * np.tanh(c_new)

    state = cell_step(CellKind.LSTM, p, x, LayerState(h, c))
    np.testing.assert_allclose(state.c, c_new, atol=1e-12)
    np.testing.assert_allclose(state.h, h_new, atol=1e-12)


@pytest.mark.parametrize("kind", CELLS)
def test_output_layer_alone(kind):
    params = zero_params(Architecture(cell_kind=kind, n=4, m=3))
    trajectory = np.random.default_rng(0).normal(size=(7, 8))
    assert forward(params, trajectory) == 0.5
    for bias in (40.0, -40.0):
        params.tensors["out.b"][...] = bias
        p = forward(params, trajectory)
        assert 0.0 < p < 1.0
        assert min(p, 1.0 - p) == pytest.approx(DEFAULT_PROB_CLAMP)
        assert 0.0 < predict_proba(params, [trajectory])[0] < 1.0


GATE_RANGES = {
    CellKind.GRU: {2: (0.0, 1.0), 3: (0.0, 1.0)},
    CellKind.LSTM: {3: (0.0, 1.0), 4: (0.0, 1.0), 5: (0.0, 1.0)},
    CellKind.NBRC: {2: (0.0, 2.0), 3: (0.0, 1.0)},
}


@pytest.mark.parametrize("kind", CELLS)
def test_gates_stay_in_their_open_ranges(kind):
    params = init_parameters(Architecture(cell_kind=kind, n=5, m=3), 12)
    rng = np.random.default_rng(12)
    p = params.layer("l1")
    for value in p.values():
        value += rng.normal(scale=0.5, size=value.shape)
    h = np.zeros((200, 5))
    c = np.zeros((200, 5)) if kind == CellKind.LSTM else None
    for _ in range(10):
        x = rng.normal(size=(200, 8))
        h, c, cache = STEP_FORWARD[kind](p, x, h, c)
        for position, (low, high) in GATE_RANGES[kind].items():
            gate = cache[position]
            assert (gate > low).all() and (gate < high).all(), position


@pytest.mark.parametrize("kind", CELLS)
def test_single_day_trajectory_is_two_steps(kind):
    arch = Architecture(cell_kind=kind, n=4, m=3)
    params = init_parameters(arch, 3)
    x = np.random.default_rng(1).normal(size=8)
    first = cell_step(kind, params.layer("l1"), x, initial(kind, 4))
    second = cell_step(kind, params.layer("l2"), first.h, initial(kind, 3))
    expected = sigmoid(second.h @ params.tensors["out.w"] + params.tensors["out.b"])
    assert forward(params, x[None, :]) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("kind", CELLS)
def test_batching_does_not_change_predictions(kind):
    params = init_parameters(Architecture(cell_kind=kind, n=6, m=4), 5)
    rng = np.random.default_rng(6)
    trajectories = [rng.normal(size=(length, 8)) for length in (1, 4, 9, 9, 2, 60)]
    single = np.array([forward(params, t) for t in trajectories])
    np.testing.assert_allclose(predict_proba(params, trajectories), single, atol=1e-12)
    np.testing.assert_allclose(
        predict_proba(params, trajectories, batch_size=4), single, atol=1e-12
    )


def numeric_gradient(params, trajectory, label, name, index, h=1e-5):
    tensor = params.tensors[name]
    saved = tensor[index]
    tensor[index] = saved + h
    plus = bce(label, forward(params, trajectory))
    tensor[index] = saved - h
    minus = bce(label, forward(params, trajectory))
    tensor[index] = saved
    return (plus - minus) / (2 * h)


@pytest.mark.parametrize("kind", CELLS)
def test_gradient_matches_finite_differences(kind):
    arch = Architecture(cell_kind=kind, n=3, m=2, input_dim=3)
    rng = np.random.default_rng(21)
    for instance in range(2):
        params = init_parameters(arch, instance)
        for value in params.tensors.values():
            value += rng.normal(scale=0.3, size=value.shape)
        trajectory = rng.normal(size=(6, 3))
        label = instance % 2
        _, grads = backward(params, trajectory, label)
        for name, value in params.tensors.items():
            for index in np.ndindex(value.shape):
                numeric = numeric_gradient(params, trajectory, label, name, index)
                analytic = grads.tensors[name][index]
                scale = max(abs(numeric), abs(analytic), 1e-5)
                assert abs(numeric - analytic) / scale < 1e-4, (name, index)


@pytest.mark.parametrize("kind", CELLS)
def test_batch_gradient_is_mean_of_sample_gradients(kind):
    params = init_parameters(Architecture(cell_kind=kind, n=4, m=3), 8)
    rng = np.random.default_rng(8)
    trajectories = [rng.normal(size=(length, 8)) for length in (3, 7, 5)]
    labels = np.array([1.0, 0.0, 1.0])
    loss, grads = loss_and_gradient(params, trajectories, labels)
    singles = [backward(params, t, int(y)) for t, y in zip(trajectories, labels)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-12)
    for name in grads.tensors:
        mean = np.mean([s[1].tensors[name] for s in singles], axis=0)
        np.testing.assert_allclose(grads.tensors[name], mean, atol=1e-12)


def test_label_equal_to_prediction_has_zero_gradient():
    params = init_parameters(Architecture(n=4, m=3), 2)
    trajectory = np.random.default_rng(2).normal(size=(5, 8))
    p = forward(params, trajectory)
    _, grads = loss_and_gradient(params, [trajectory], np.array([p]))
    for value in grads.tensors.values():
        assert not value.any()


def test_forward_is_deterministic():
    params = init_parameters(Architecture(cell_kind=CellKind.GRU, n=8, m=4), 0)
    trajectory = np.random.default_rng(0).poisson(2.0, size=(30, 8)).astype(float)
    assert forward(params, trajectory) == forward(params, trajectory)


def test_default_network_stays_finite_on_long_inputs():
    params = init_parameters(Architecture(), 0)
    trajectory = np.random.default_rng(0).poisson(20.0, size=(60, 8)).astype(float)
    p = forward(params, trajectory)
    assert 0.0 < p < 1.0


def test_non_finite_weights_raise_numeric_error():
    params = init_parameters(Architecture(n=4, m=3), 0)
    params.tensors["l1.W_i"][...] = np.nan
    with pytest.raises(NumericError) as excinfo:
        forward(params, np.ones((3, 8)))
    assert excinfo.value.layer == "l1"
    assert excinfo.value.step == 0


@pytest.mark.parametrize("kind", CELLS)
def test_model_file_round_trip(tmp_path, kind):
    params = init_parameters(Architecture(cell_kind=kind, n=5, m=3), 4)
    params = params.with_standardization(np.arange(8.0), np.full(8, 2.0))
    path = tmp_path / "net.model"
    save_model(params, path)
    loaded = load_model(path)
    assert loaded.architecture == params.architecture
    assert loaded.seed == 4
    np.testing.assert_array_equal(loaded.input_shift, params.input_shift)
    np.testing.assert_array_equal(loaded.input_scale, params.input_scale)
    for name, value in params.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], value)
    trajectory = np.random.default_rng(0).normal(size=(4, 8))
    assert forward(loaded, trajectory) == forward(params, trajectory)


def test_bad_model_files_are_rejected(tmp_path):
    path = tmp_path / "net.model"
    path.write_bytes(json.dumps({"format": "other", "version": 1}).encode() + b"\n")
    with pytest.raises(ConfigError):
        load_model(path)

    save_model(init_parameters(Architecture(n=2, m=2), 0), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ConfigError):
        load_model(path)
