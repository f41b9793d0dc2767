import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuraldmd import diffla as D
from neuraldmd import ndmd
from neuraldmd import synthgen as S

from gradcases import tiny_ndmd_case
from oracles import OSC_EIGS, chamfer

points = st.lists(
    st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
    min_size=1, max_size=6,
)


def small_series(T=30, M=4, seed=0):
    ts = S.preset("5.1", seed, obs_dim=M)
    x = ts.x[:, :T]
    return S.Standardizer.fit(x).transform(x)


@pytest.mark.parametrize("seed", [0, 1])
def test_step_gradient_matches_fd(seed):
    assert tiny_ndmd_case(seed) < 1e-3


def test_step_gradient_with_regularizer(rng):
    x = small_series(T=12, M=3)
    model = ndmd.init_model(3, 2, hidden=6, seed=1, rank=2)
    taus = np.array([0, 2, 3, 5, 8, 10])
    reg = ndmd.chamfer_regularizer(OSC_EIGS, 0.5)
    res = ndmd.ndmd_step_loss(model, x, taus, regularizer=reg)
    arrays = model.param_arrays()
    i = 0
    eps = 1e-6
    idx = (1, 0)
    up, dn = [a.copy() for a in arrays], [a.copy() for a in arrays]
    up[i][idx] += eps
    dn[i][idx] -= eps
    fd = (ndmd.ndmd_step_loss(model.with_arrays(up), x, taus, regularizer=reg).loss
          - ndmd.ndmd_step_loss(model.with_arrays(dn), x, taus, regularizer=reg).loss) / (2 * eps)
    assert res.grads[i][idx] == pytest.approx(fd, rel=1e-4)


def test_step_counts_unique_timesteps():
    # a zero decoder makes the loss the mean squared norm over tau and tau+1
    x = small_series(T=10, M=3)
    model = ndmd.init_model(3, 2, hidden=4, seed=0, rank=2)
    for w in model.decoder.weights:
        w[:] = 0.0
    taus = [1, 2, 5]
    res = ndmd.ndmd_step_loss(model, x, taus)
    t_all = [1, 2, 3, 5, 6]
    assert res.loss == pytest.approx(np.sum(x[:, t_all] ** 2) / len(t_all))


def test_step_rejects_out_of_range():
    x = small_series(T=10, M=3)
    model = ndmd.init_model(3, 2, hidden=4, seed=0, rank=2)
    with pytest.raises(D.ContractViolation):
        ndmd.ndmd_step_loss(model, x, [3, 9])


def test_imaginary_residue_is_tiny():
    x = small_series(T=20, M=4)
    model = ndmd.init_model(4, 2, hidden=8, seed=0, rank=2)
    res = ndmd.ndmd_step_loss(model, x, np.arange(0, 19, 2))
    assert res.imag_residual < 1e-6


@given(points, points)
def test_chamfer_metric_properties(a, b):
    d_ab = ndmd.chamfer_eig(a, b)
    assert d_ab >= 0
    assert d_ab == pytest.approx(ndmd.chamfer_eig(b, a), abs=1e-12)
    assert ndmd.chamfer_eig(a, a) == 0.0
    # multiplicity does not matter, only the point set
    assert ndmd.chamfer_eig(a + a, a) == 0.0
    assert d_ab == pytest.approx(chamfer(a, b), abs=1e-9)


def test_chamfer_on_tape_is_differentiable():
    target = np.array(OSC_EIGS)

    def f(v):
        lam = v[0] + 1j * v[1]
        return ndmd.chamfer_eig(D.concat([D.reshape(lam, (1,)), D.reshape(D.conj(lam), (1,))]),
                                target)

    assert D.grad_check(f, np.array([0.7, 0.3])) < 1e-7


def test_chamfer_empty_rejected():
    with pytest.raises(D.ContractViolation):
        ndmd.chamfer_eig([], [1.0])


def test_forecast_horizon_reconstructs_linear_system():
    # identity-like networks are not available, so check the spectral path with a trained
    # model being irrelevant: forecasts at offset 0 decode the anchor projection
    x = small_series(T=20, M=4)
    model = ndmd.init_model(4, 2, hidden=8, seed=0, rank=2)
    out, psihat = ndmd.forecast_horizon(model, x[:, :15], 20, return_lifted=True)
    assert out.shape == (4, 20)
    psi = ndmd.encode(model, x[:, :15])
    sm = ndmd.fit_spectral(model, x[:, :15])
    assert np.allclose(psihat[:, 0], sm.modes @ D.pinv(sm.modes) @ psi[:, 0])


def test_train_reduces_validation_loss():
    ts = S.preset("5.1", 0)
    st_ = S.Standardizer.fit(ts.x[:, :70])
    x = st_.transform(ts.x)
    model = ndmd.init_model(10, 2, hidden=16, seed=0, rank=2)
    cfg = ndmd.TrainConfig(batch_size=128, max_epochs=60, patience=60, dropout=0.0)
    fitted, rep = ndmd.train(model, x, 70, 10, cfg)
    assert len(rep.val_loss) == 60
    assert min(rep.val_loss) < rep.val_loss[0]
    assert rep.best_epoch == int(np.argmin(rep.val_loss)) + 1
    assert len(rep.eigenvalues) == 2


def test_train_is_bit_reproducible():
    x = small_series(T=30, M=4)
    cfg = ndmd.TrainConfig(batch_size=8, max_epochs=5, patience=5, dropout=0.1, seed=3)

    def run():
        m = ndmd.init_model(4, 2, hidden=8, seed=3, rank=2)
        return ndmd.train(m, x, 25, 5, cfg)

    (m1, r1), (m2, r2) = run(), run()
    assert r1.train_loss == r2.train_loss
    assert all(np.array_equal(a, b) for a, b in zip(m1.param_arrays(), m2.param_arrays()))


def test_aux_with_zero_beta_equals_plain():
    x = small_series(T=30, M=4)
    cfg = ndmd.TrainConfig(batch_size=8, max_epochs=4, patience=4, seed=1, beta=0.0)
    a = ndmd.train(ndmd.init_model(4, 2, hidden=8, seed=1, rank=2), x, 25, 5, cfg)[1]
    b = ndmd.train_with_aux(ndmd.init_model(4, 2, hidden=8, seed=1, rank=2), x, 25, 5, cfg,
                            OSC_EIGS)[1]
    assert a.train_loss == b.train_loss
    assert a.val_loss == b.val_loss


def test_regularizer_pulls_eigenvalues():
    x = small_series(T=40, M=4)
    target = np.array([0.5 + 0.5j, 0.5 - 0.5j])
    cfg = ndmd.TrainConfig(batch_size=16, max_epochs=40, patience=40, seed=0, dropout=0.0,
                           beta=50.0)
    _, plain = ndmd.train(ndmd.init_model(4, 2, hidden=8, seed=0, rank=2), x, 35, 5,
                          ndmd.TrainConfig(**{**cfg.__dict__, "beta": 0.0}))
    _, reg = ndmd.train_with_aux(ndmd.init_model(4, 2, hidden=8, seed=0, rank=2), x, 35, 5,
                                 cfg, target)
    assert ndmd.chamfer_eig(reg.eigenvalues, target) < ndmd.chamfer_eig(plain.eigenvalues, target)


def test_training_aborts_on_nonfinite():
    x = small_series(T=20, M=3)
    x[0, 4] = np.nan
    with pytest.raises(ndmd.TrainingError) as info:
        ndmd.train(ndmd.init_model(3, 2, hidden=4, seed=0, rank=2), x, 15, 5,
                   ndmd.TrainConfig(batch_size=14, max_epochs=3))
    assert info.value.report is not None


def test_control_step_and_forecast():
    ts = S.preset("5.3", 0)
    x = S.Standardizer.fit(ts.x).transform(ts.x)
    z = ts.z
    model = ndmd.init_model(10, 2, hidden=8, seed=0, rank=2, exo_dim=1, rank_p=3)
    assert model.is_control and model.effective_rank_p() == 3
    res = ndmd.ndmdc_step_loss(model, x, z, 5, 20)
    assert np.isfinite(res.loss) and len(res.grads) == len(model.param_arrays())
    out = ndmd.forecast_horizon(model, x[:, :30], 40, z)
    assert out.shape == (10, 40)
    with pytest.raises(D.ContractViolation):
        ndmd.forecast_horizon(model, x[:, :30], 40, None)


def test_control_step_gradient(rng):
    ts = S.preset("5.3", 1, obs_dim=3)
    x = S.Standardizer.fit(ts.x).transform(ts.x)
    model = ndmd.init_model(3, 2, hidden=6, seed=2, rank=2, exo_dim=1, rank_p=3)
    res = ndmd.ndmdc_step_loss(model, x, ts.z, 2, 10)
    arrays = model.param_arrays()
    for i in (0, len(arrays) - 2):
        idx = (0, 0)
        up, dn = [a.copy() for a in arrays], [a.copy() for a in arrays]
        up[i][idx] += 1e-6
        dn[i][idx] -= 1e-6
        fd = (ndmd.ndmdc_step_loss(model.with_arrays(up), x, ts.z, 2, 10).loss
              - ndmd.ndmdc_step_loss(model.with_arrays(dn), x, ts.z, 2, 10).loss) / 2e-6
        assert res.grads[i][idx] == pytest.approx(fd, rel=1e-3, abs=1e-8)


def test_model_save_load(tmp_path):
    model = ndmd.init_model(3, 2, hidden=4, seed=0, rank=2, exo_dim=1, rank_p=3)
    model.save(tmp_path / "m.json", {"note": 1})
    back, header = ndmd.NdmdModel.load(tmp_path / "m.json")
    assert header["note"] == 1 and header["K"] == 2
    assert back.rank == 2 and back.rank_p == 3 and back.is_control
    assert all(np.array_equal(a, b) for a, b in zip(model.param_arrays(), back.param_arrays()))


def test_config_validation():
    with pytest.raises(D.ContractViolation):
        ndmd.TrainConfig(batch_size=1)
    with pytest.raises(D.ContractViolation):
        ndmd.TrainConfig(beta=-1.0)
