"""Comparison forecasters: DMD variants, EDMD, AR, one-step NN, AEAR and LKIS.

Every forecaster exposes ``predict(history, horizon, z=None)`` returning the
``horizon`` steps that follow ``history`` (both column-major).  One-step
models forecast by closed-loop rollout from the last observed state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffla as D
from . import dmdcore, ndmd
from .neuralnet import AdamState, MlpParams, adam_step, mlp_apply, mlp_init

IN_SCOPE = ("DMD", "DMD-rank-r", "DMDc", "DMDc-rank-r", "EDMD", "AR", "NN-1step", "AEAR", "LKIS")
OUT_OF_SCOPE = ("KDMD", "KDMD-RBF", "KDMD-Poly", "SDMD", "LSTM")


class UnsupportedModelError(ValueError):
    pass


@dataclass
class NeuralConfig:
    hidden: int = 64
    n_hidden: int = 2
    lifted_dim: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 2000
    patience: int = 200
    seed: int = 0


# --------------------------------------------------------------------------
# closed-form forecasters


@dataclass
class DmdForecaster:
    """Exact DMD on raw (or EDMD-lifted) observations, rolled out from the last state."""

    model: dmdcore.SpectralModel
    lift: bool = False
    obs_dim: int = 0

    @classmethod
    def fit(cls, x, rank=None, threshold=None, lift=False):
        x = np.asarray(x, float)
        series = dmdcore.edmd_lift(x) if lift else x
        return cls(dmdcore.fit_series(series, rank, threshold), lift, x.shape[0])

    @property
    def eigenvalues(self):
        return self.model.lambdas

    def predict(self, history, horizon, z=None):
        last = np.asarray(history, float)[:, -1]
        state = dmdcore.edmd_lift(last) if self.lift else last
        alpha = D.pinv(self.model.modes) @ state
        out = dmdcore.spectral_rollout(self.model.lambdas, self.model.modes, alpha,
                                       np.arange(1, horizon + 1))
        return np.real(out[: self.obs_dim])


@dataclass
class DmdcForecaster:
    model: dmdcore.ControlModel

    @classmethod
    def fit(cls, x, z, rank_p=None, rank_r=None):
        x = np.asarray(x, float)
        z = np.atleast_2d(np.asarray(z, float))
        n = x.shape[1] - 1
        k, d = x.shape[0], z.shape[0]
        rank_p = rank_p or min(k + d, n)
        rank_r = rank_r or min(k, n)
        return cls(dmdcore.dmdc_fit(x[:, :-1], x[:, 1:], z[:, :n], rank_p, rank_r))

    @property
    def eigenvalues(self):
        return self.model.lambdas

    def predict(self, history, horizon, z=None):
        if z is None:
            raise D.ContractViolation("DMDc needs exogenous inputs")
        history = np.asarray(history, float)
        a = history.shape[1]
        z = np.atleast_2d(np.asarray(z, float))
        if z.shape[1] < a + horizon - 1:
            raise D.ContractViolation("exogenous inputs do not cover the horizon")
        m = self.model
        pinv = D.pinv(m.modes)
        coeff = pinv @ history[:, -1]
        out = []
        for h in range(horizon):
            coeff = m.lambdas * coeff + m.input_map @ z[:, a - 1 + h]
            out.append(np.real(m.modes @ coeff))
        return np.stack(out, axis=1)


@dataclass
class ArForecaster:
    """Affine one-lag least squares ``x_{t+1} = W x_t + c``."""

    w: np.ndarray
    c: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, float)
        reg = np.vstack([x[:, :-1], np.ones((1, x.shape[1] - 1))])
        coef = x[:, 1:] @ np.linalg.pinv(reg)
        return cls(coef[:, :-1], coef[:, -1])

    @property
    def eigenvalues(self):
        return np.linalg.eigvals(self.w)

    def predict(self, history, horizon, z=None):
        s = np.asarray(history, float)[:, -1]
        out = np.empty((s.shape[0], horizon))
        for h in range(horizon):
            s = self.w @ s + self.c
            out[:, h] = s
        return out


# --------------------------------------------------------------------------
# neural one-step models


def _rollout_mse(forecaster, x, n_train, n_val):
    pred = forecaster.predict(x[:, :n_train], n_val)
    err = float(np.mean((pred - x[:, n_train:n_train + n_val]) ** 2))
    return err if np.isfinite(err) else math.inf


def _fit_one_step(params, loss_fn, make, x, n_train, n_val, cfg: NeuralConfig):
    """Adam on random minibatches of transitions with rollout early stopping."""
    rng = np.random.default_rng(cfg.seed)
    n_pairs = n_train - 1
    s = min(cfg.batch_size, n_pairs)
    n_batches = math.ceil(n_pairs / s)
    state = AdamState.zeros_like(params)
    best, best_params, wait = math.inf, params, 0
    for _ in range(cfg.max_epochs):
        for _ in range(n_batches):
            idx = rng.choice(n_pairs, size=s, replace=False)
            tape = D.Tape()
            pv = [tape.leaf(p) for p in params]
            loss = loss_fn(pv, x[:, idx], x[:, idx + 1])
            grads = tape.gradient(loss, pv)
            params, state = adam_step(params, grads, state, lr=cfg.lr)
        score = _rollout_mse(make(params), x, n_train, n_val) if n_val > 0 else \
            float(D.value_of(loss_fn(params, x[:, :n_pairs], x[:, 1:n_train])))
        if score < best:
            best, best_params, wait = score, params, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    return make(best_params)


def _split(params, nets: list[MlpParams]):
    out = []
    for n in nets:
        k = 2 * len(n.weights)
        out.append((params[:k:2], params[1:k:2], n.activation))
        params = params[k:]
    return out, params


@dataclass
class NnForecaster:
    net: MlpParams

    @classmethod
    def fit(cls, x, n_train, n_val, cfg: NeuralConfig):
        m = x.shape[0]
        proto = mlp_init([m] + [cfg.hidden] * cfg.n_hidden + [m], "tanh", cfg.seed)

        def loss_fn(pv, xa, xb):
            pred = mlp_apply(pv[0::2], pv[1::2], xa, proto.activation)
            return D.square_norm(pred - xb) / xa.shape[1]

        def make(params):
            return cls(MlpParams.from_arrays(params, proto.activation))

        return _fit_one_step(proto.arrays(), loss_fn, make, x, n_train, n_val, cfg)

    def predict(self, history, horizon, z=None):
        s = np.asarray(history, float)[:, -1:]
        out = []
        for _ in range(horizon):
            s = mlp_apply(self.net.weights, self.net.biases, s, self.net.activation)
            out.append(s[:, 0])
        return np.stack(out, axis=1)


@dataclass
class LinearKoopmanForecaster:
    """Encoder, linear transition and decoder (AEAR and LKIS share this shape)."""

    encoder: MlpParams
    decoder: MlpParams
    transition: np.ndarray
    kind: str = "AEAR"

    @property
    def eigenvalues(self):
        return np.linalg.eigvals(self.transition)

    @classmethod
    def fit(cls, kind, x, n_train, n_val, cfg: NeuralConfig):
        if kind not in ("AEAR", "LKIS"):
            raise UnsupportedModelError(kind)
        m = x.shape[0]
        rng = np.random.default_rng(cfg.seed)
        mid = [cfg.hidden] * cfg.n_hidden
        enc = mlp_init([m, *mid, cfg.lifted_dim], "tanh", rng)
        dec = mlp_init([cfg.lifted_dim, *mid, m], "tanh", rng)
        nets = [enc, dec]
        params = enc.arrays() + dec.arrays() + [np.eye(cfg.lifted_dim)]

        def loss_fn(pv, xa, xb):
            (fe, fd), rest = _split(pv, nets)
            a = rest[0]
            psi_a = mlp_apply(fe[0], fe[1], xa, fe[2])
            n = xa.shape[1]
            if kind == "AEAR":
                pred = mlp_apply(fd[0], fd[1], a @ psi_a, fd[2])
                return D.square_norm(pred - xb) / n
            psi_b = mlp_apply(fe[0], fe[1], xb, fe[2])
            recon = mlp_apply(fd[0], fd[1], psi_a, fd[2])
            return (D.square_norm(recon - xa) + D.square_norm(a @ psi_a - psi_b)) / n

        def make(params):
            (fe, fd), rest = _split(params, nets)
            return cls(MlpParams(list(fe[0]), list(fe[1]), fe[2]),
                       MlpParams(list(fd[0]), list(fd[1]), fd[2]), rest[0], kind)

        return _fit_one_step(params, loss_fn, make, x, n_train, n_val, cfg)

    def predict(self, history, horizon, z=None):
        """AEAR feeds decoded predictions back; LKIS iterates in the lifted space."""
        e, d = self.encoder, self.decoder
        x = np.asarray(history, float)[:, -1:]
        psi = mlp_apply(e.weights, e.biases, x, e.activation)
        out = []
        for _ in range(horizon):
            x = mlp_apply(d.weights, d.biases, self.transition @ psi, d.activation)
            out.append(x[:, 0])
            if self.kind == "AEAR":
                psi = mlp_apply(e.weights, e.biases, x, e.activation)
            else:
                psi = self.transition @ psi
        return np.stack(out, axis=1)


# --------------------------------------------------------------------------
# NDMD wrapped as a forecaster


@dataclass
class NdmdForecaster:
    model: ndmd.NdmdModel
    report: ndmd.TrainReport | None = field(default=None, repr=False)

    @property
    def eigenvalues(self):
        return self.report.eigenvalues if self.report is not None else None

    def predict(self, history, horizon, z=None):
        history = np.asarray(history, float)
        a = history.shape[1]
        pred = ndmd.forecast_horizon(self.model, history, a + horizon, z)
        return pred[:, a:]


def fit_baseline(kind: str, x, n_train: int, n_val: int = 0, z=None, *, rank: int | None = None,
                 threshold: float = dmdcore.DEFAULT_THRESHOLD,
                 config: NeuralConfig | None = None):
    """Fit a comparison model on the first ``n_train`` columns.

    Closed-form models use the training split only; neural models use
    ``n_val`` further columns for early stopping.
    """
    if kind in OUT_OF_SCOPE:
        raise UnsupportedModelError(f"{kind} is not implemented")
    x = np.asarray(x, float)
    train = x[:, :n_train]
    cfg = config or NeuralConfig()
    if kind == "DMD":
        return DmdForecaster.fit(train, threshold=threshold)
    if kind == "DMD-rank-r":
        return DmdForecaster.fit(train, rank=rank or 2)
    if kind == "EDMD":
        return DmdForecaster.fit(train, threshold=threshold, lift=True)
    if kind == "DMDc":
        return DmdcForecaster.fit(train, np.atleast_2d(z)[:, :n_train])
    if kind == "DMDc-rank-r":
        r = rank or 2
        d = np.atleast_2d(z).shape[0]
        return DmdcForecaster.fit(train, np.atleast_2d(z)[:, :n_train], rank_p=r + d, rank_r=r)
    if kind == "AR":
        return ArForecaster.fit(train)
    if kind == "NN-1step":
        return NnForecaster.fit(x, n_train, n_val, cfg)
    if kind in ("AEAR", "LKIS"):
        return LinearKoopmanForecaster.fit(kind, x, n_train, n_val, cfg)
    raise UnsupportedModelError(f"unknown model kind {kind!r}")
