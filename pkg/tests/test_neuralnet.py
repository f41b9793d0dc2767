import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuraldmd import diffla as D
from neuraldmd.neuralnet import (
    Adam,
    AdamState,
    DropoutMask,
    MlpParams,
    adam_step,
    load_params,
    mlp_apply,
    mlp_backward,
    mlp_forward,
    mlp_init,
    save_params,
)

from oracles import central_difference, max_rel_err


def test_init_shapes_and_glorot_bound():
    p = mlp_init([3, 16, 16, 2], seed=0)
    assert p.sizes == [3, 16, 16, 2]
    assert [w.shape for w in p.weights] == [(16, 3), (16, 16), (2, 16)]
    assert all(np.all(b == 0) for b in p.biases)
    assert np.abs(p.weights[1]).max() <= np.sqrt(6 / 32)


def test_init_is_seeded():
    a, b = mlp_init([4, 8, 2], seed=7), mlp_init([4, 8, 2], seed=7)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


@pytest.mark.parametrize("sizes", [[3], [3, 0, 2]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(D.ContractViolation):
        mlp_init(sizes)


def test_unknown_activation():
    with pytest.raises(D.ContractViolation):
        mlp_init([2, 2], activation="gelu")


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_backward_matches_fd(act):
    rng = np.random.default_rng(3)
    p = mlp_init([4, 16, 16, 3], act, seed=1)
    for b in p.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((4, 5))
    adj = rng.standard_normal((3, 5))
    out, trace = mlp_forward(p, x)
    gp, gx = mlp_backward(trace, adj)

    def loss_x(xx):
        return float(np.sum(mlp_apply(p.weights, p.biases, xx, act) * adj))

    assert max_rel_err(gx, central_difference(loss_x, x, 1e-5)) < 1e-6
    for i, w in enumerate(p.weights):
        def loss_w(ww, i=i):
            ws = list(p.weights)
            ws[i] = ww
            return float(np.sum(mlp_apply(ws, p.biases, x, act) * adj))
        assert max_rel_err(gp.weights[i], central_difference(loss_w, w, 1e-5)) < 1e-6


def test_forward_deterministic_without_dropout():
    p = mlp_init([2, 8, 2], seed=0)
    x = np.ones((2, 3))
    assert np.array_equal(mlp_forward(p, x)[0], mlp_forward(p, x)[0])


def test_forward_shape_check():
    p = mlp_init([2, 8, 2], seed=0)
    with pytest.raises(D.ContractViolation):
        mlp_forward(p, np.ones((3, 4)))


def test_dropout_mask_scaling():
    p = mlp_init([2, 64, 64, 2], seed=0)
    mask = DropoutMask.sample(p, 500, 0.25, np.random.default_rng(0))
    assert len(mask.masks) == 2
    vals = np.unique(mask.masks[0])
    assert set(np.round(vals, 12)) <= {0.0, round(1 / 0.75, 12)}
    # inverted scaling keeps the expectation at one
    assert abs(mask.masks[0].mean() - 1.0) < 0.02


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_adam_zero_gradient_fixed_point(vals):
    p = [np.array(vals)]
    new, state = adam_step(p, [np.zeros_like(p[0])], AdamState.zeros_like(p))
    assert np.array_equal(new[0], p[0])
    assert state.step == 1


def test_adam_first_step_is_lr_sign():
    p = [np.array([1.0, -2.0])]
    new, _ = adam_step(p, [np.array([3.0, -0.5])], AdamState.zeros_like(p), lr=0.1)
    assert np.allclose(new[0], [0.9, -1.9], atol=1e-6)


def test_adam_minimizes_quadratic():
    opt = Adam(lr=0.05)
    x = [np.array([3.0, -4.0])]
    for _ in range(500):
        x = opt.step(x, [2 * x[0]])
    assert np.linalg.norm(x[0]) < 1e-2


def test_adam_shape_mismatch():
    with pytest.raises(D.ContractViolation):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]))


def test_checkpoint_roundtrip_exact(tmp_path):
    p = mlp_init([3, 5, 2], "relu", seed=2)
    path = tmp_path / "ck.json"
    save_params(path, {"enc": p}, {"K": 2})
    nets, header = load_params(path)
    assert header == {"K": 2}
    q = nets["enc"]
    assert q.activation == "relu"
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError):
        load_params(path)
    path.write_text(json.dumps({"format": "neuraldmd-mlp", "version": 99}))
    with pytest.raises(ValueError):
        load_params(path)


def test_params_from_arrays_roundtrip():
    p = mlp_init([2, 4, 3], seed=0)
    q = MlpParams.from_arrays(p.arrays(), p.activation)
    assert q.sizes == p.sizes
