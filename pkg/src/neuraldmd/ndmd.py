"""Neural DMD: encoder -> differentiable DMD -> decoder, trained end to end.

Series are column-major (``dim x T``) and timesteps are 0-based.  Training
data are expected to be standardized already; see
:class:`neuraldmd.synthgen.Standardizer`.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffla as D
from . import dmdcore
from .neuralnet import (
    AdamState,
    DropoutMask,
    MlpParams,
    adam_step,
    load_params,
    mlp_apply,
    mlp_init,
    save_params,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted; ``report`` carries the history up to the failure."""

    def __init__(self, msg: str, report: "TrainReport | None" = None):
        super().__init__(msg)
        self.report = report


@dataclass
class NdmdModel:
    encoder: MlpParams
    decoder: MlpParams
    exo_encoder: MlpParams | None = None
    rank: int | None = None
    threshold: float = dmdcore.DEFAULT_THRESHOLD
    rank_p: int | None = None

    @property
    def lifted_dim(self) -> int:
        return self.encoder.sizes[-1]

    @property
    def is_control(self) -> bool:
        return self.exo_encoder is not None

    @property
    def exo_code_dim(self) -> int:
        return self.exo_encoder.sizes[-1] if self.exo_encoder is not None else 0

    def nets(self) -> list[MlpParams]:
        return [n for n in (self.encoder, self.decoder, self.exo_encoder) if n is not None]

    def param_arrays(self) -> list[np.ndarray]:
        return [a for n in self.nets() for a in n.arrays()]

    def with_arrays(self, arrays) -> "NdmdModel":
        arrays = list(arrays)
        rebuilt = []
        for net in self.nets():
            k = 2 * len(net.weights)
            rebuilt.append(MlpParams.from_arrays(arrays[:k], net.activation))
            arrays = arrays[k:]
        exo = rebuilt[2] if self.exo_encoder is not None else None
        return NdmdModel(rebuilt[0], rebuilt[1], exo, self.rank, self.threshold, self.rank_p)

    def effective_rank_p(self) -> int:
        return self.rank_p if self.rank_p is not None else self.lifted_dim + self.exo_code_dim

    def effective_rank(self) -> int:
        return self.rank if self.rank is not None else self.lifted_dim

    def save(self, path, extra: dict | None = None) -> None:
        nets = {"encoder": self.encoder, "decoder": self.decoder}
        if self.exo_encoder is not None:
            nets["exo_encoder"] = self.exo_encoder
        header = {"kind": "ndmd", "K": self.lifted_dim, "R": self.rank, "P": self.rank_p,
                  "threshold": self.threshold, **(extra or {})}
        save_params(path, nets, header)

    @classmethod
    def load(cls, path) -> tuple["NdmdModel", dict]:
        nets, header = load_params(path)
        model = cls(nets["encoder"], nets["decoder"], nets.get("exo_encoder"),
                    header.get("R"), header.get("threshold", dmdcore.DEFAULT_THRESHOLD),
                    header.get("P"))
        return model, header


def init_model(obs_dim: int, lifted_dim: int, hidden: int = 256, n_hidden: int = 2,
               activation: str = "tanh", seed=0, rank: int | None = None,
               threshold: float = dmdcore.DEFAULT_THRESHOLD, exo_dim: int = 0,
               exo_code_dim: int = 1, rank_p: int | None = None) -> NdmdModel:
    """Encoder ``obs_dim -> lifted_dim``, mirrored decoder, optional input encoder."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mid = [hidden] * n_hidden
    enc = mlp_init([obs_dim, *mid, lifted_dim], activation, rng)
    dec = mlp_init([lifted_dim, *mid, obs_dim], activation, rng)
    exo = mlp_init([exo_dim, *mid, exo_code_dim], activation, rng) if exo_dim else None
    return NdmdModel(enc, dec, exo, rank, threshold, rank_p)


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 1e-3
    dropout: float = 0.1
    max_epochs: int = 1000
    patience: int = 50
    seed: int = 0
    beta: float = 0.0

    def __post_init__(self):
        if self.batch_size < 2:
            raise D.ContractViolation("batch size must be at least 2")
        if self.beta < 0:
            raise D.ContractViolation("beta must be non-negative")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    eigenvalues: np.ndarray | None = None
    clamp_events: int = 0
    stop_epoch: int = 0
    best_epoch: int = 0
    wall_clock: float = 0.0
    imag_residual: float = 0.0


@dataclass
class StepResult:
    loss: float
    eigenvalues: np.ndarray
    grads: list[np.ndarray]
    clamp_events: int
    imag_residual: float
    mse: float


# --------------------------------------------------------------------------
# eigenvalue regularizer


def chamfer_eig(estimated, target) -> float:
    """Symmetric nearest-neighbour sum of |lambda* - lambda| between two sets.

    Accepts tape variables for ``estimated``; the result is then a Var.
    """
    if not D.is_var(estimated):
        estimated = np.asarray(estimated, dtype=complex)
    target = np.asarray(D.value_of(target), dtype=complex)
    if np.size(D.value_of(estimated)) == 0 or target.size == 0:
        raise D.ContractViolation("eigenvalue lists must be non-empty")
    diff = D.reshape(target, (-1, 1)) - D.reshape(estimated, (1, -1))
    dist = D.abs_(diff)
    total = D.sum_(D.take_min(dist, 1)) + D.sum_(D.take_min(dist, 0))
    return total if D.is_var(total) else float(total)


def chamfer_regularizer(target, beta: float) -> Callable:
    target = np.asarray(target, dtype=complex)
    return lambda lambdas: beta * chamfer_eig(lambdas, target)


# --------------------------------------------------------------------------
# single training steps


def _masks(model: NdmdModel, n_cols: int, rate: float, rng):
    if rng is None or rate <= 0:
        return {}
    out = {"encoder": DropoutMask.sample(model.encoder, n_cols, rate, rng),
           "decoder": DropoutMask.sample(model.decoder, n_cols, rate, rng)}
    if model.exo_encoder is not None:
        out["exo_encoder"] = DropoutMask.sample(model.exo_encoder, n_cols, rate, rng)
    return out


def _leaves(model: NdmdModel, tape: D.Tape):
    pv = [tape.leaf(a) for a in model.param_arrays()]
    nets = {}
    i = 0
    for name, net in zip(("encoder", "decoder", "exo_encoder"), model.nets()):
        k = 2 * len(net.weights)
        nets[name] = (pv[i:i + k:2], pv[i + 1:i + k:2], net.activation)
        i += k
    return pv, nets


def _run(nets, name, x, masks):
    w, b, act = nets[name]
    return mlp_apply(w, b, x, act, masks.get(name))


def _finish(tape, pv, loss, sq_err, n_t, lambdas, psihat, regularizer) -> StepResult:
    imag = np.linalg.norm(np.imag(D.value_of(psihat)))
    realn = np.linalg.norm(np.real(D.value_of(psihat)))
    total = loss
    if regularizer is not None:
        total = total + regularizer(lambdas)
    grads = tape.gradient(total, pv)
    return StepResult(
        loss=float(D.value_of(total)),
        eigenvalues=np.array(D.value_of(lambdas)),
        grads=grads,
        clamp_events=tape.clamp_events,
        imag_residual=float(imag / realn) if realn > 0 else 0.0,
        mse=float(D.value_of(loss)),
    )


def ndmd_step_loss(model: NdmdModel, x: np.ndarray, taus, *, dropout: float = 0.0,
                   rng: np.random.Generator | None = None,
                   regularizer: Callable | None = None) -> StepResult:
    """Forecast loss of one batch and its gradient with respect to all parameters.

    ``taus`` are source timesteps; every timestep in ``taus`` and ``taus + 1``
    is forecast from the earliest one and counted once in the average.
    """
    x = np.asarray(x, dtype=float)
    taus = np.sort(np.asarray(taus, dtype=np.int64))
    if taus.size < 1 or taus[0] < 0 or taus[-1] > x.shape[1] - 2:
        raise D.ContractViolation("timesteps out of range")
    t_all = np.union1d(taus, taus + 1)
    xt = x[:, t_all]
    masks = _masks(model, t_all.size, dropout, rng)

    tape = D.Tape()
    pv, nets = _leaves(model, tape)
    psi = _run(nets, "encoder", xt, masks)
    i1 = np.searchsorted(t_all, taus)
    i2 = np.searchsorted(t_all, taus + 1)
    _, lambdas, modes, _ = dmdcore.spectral_core(
        psi[:, i1], psi[:, i2], rank=model.rank,
        threshold=None if model.rank is not None else model.threshold)
    alpha = dmdcore.amplitudes(modes, psi[:, 0])
    psihat = dmdcore.spectral_rollout(lambdas, modes, alpha, t_all - t_all[0])
    xhat = _run(nets, "decoder", D.real(psihat), masks)
    sq = D.square_norm(xhat - xt)
    loss = sq / t_all.size
    return _finish(tape, pv, loss, sq, t_all.size, lambdas, psihat, regularizer)


def ndmdc_step_loss(model: NdmdModel, x: np.ndarray, z: np.ndarray, tau: int, window: int, *,
                    dropout: float = 0.0, rng: np.random.Generator | None = None,
                    regularizer: Callable | None = None) -> StepResult:
    """Control-variant loss over the consecutive timesteps ``tau .. tau + window``."""
    if not model.is_control:
        raise D.ContractViolation("model has no exogenous encoder")
    x = np.asarray(x, dtype=float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if tau < 0 or tau + window > x.shape[1] - 1 or z.shape[1] < tau + window + 1:
        raise D.ContractViolation("window exceeds available data")
    cols = np.arange(tau, tau + window + 1)
    xt = x[:, cols]
    masks = _masks(model, cols.size, dropout, rng)

    tape = D.Tape()
    pv, nets = _leaves(model, tape)
    psi = _run(nets, "encoder", xt, masks)
    xi = _run(nets, "exo_encoder", z[:, cols], masks)
    lambdas, modes, alpha, input_map = _control_spectral(model, psi, xi, window)
    psihat = dmdcore.control_rollout(lambdas, modes, alpha, input_map, xi[:, :window],
                                     window + 1)
    xhat = _run(nets, "decoder", D.real(psihat), masks)
    sq = D.square_norm(xhat - xt)
    loss = sq / cols.size
    return _finish(tape, pv, loss, sq, cols.size, lambdas, psihat, regularizer)


def _control_spectral(model: NdmdModel, psi, xi, window: int):
    parts = dmdcore.control_core(psi[:, :window], psi[:, 1:window + 1], xi[:, :window],
                                 model.effective_rank_p(), model.effective_rank())
    phi_pinv = D.pinv(parts["modes"])
    return parts["lambdas"], parts["modes"], phi_pinv @ psi[:, 0], phi_pinv @ parts["b_hat"]


# --------------------------------------------------------------------------
# forecasting


def encode(model: NdmdModel, x) -> np.ndarray:
    return mlp_apply(model.encoder.weights, model.encoder.biases, np.asarray(x, float),
                     model.encoder.activation)


def decode(model: NdmdModel, psi) -> np.ndarray:
    return mlp_apply(model.decoder.weights, model.decoder.biases, np.asarray(psi, float),
                     model.decoder.activation)


def fit_spectral(model: NdmdModel, window: np.ndarray, z_window: np.ndarray | None = None):
    """Spectral model of the encoded window, anchored at its first column."""
    psi = encode(model, window)
    n = psi.shape[1]
    if model.is_control:
        if z_window is None:
            raise D.ContractViolation("control models need exogenous inputs")
        xi = mlp_apply(model.exo_encoder.weights, model.exo_encoder.biases,
                       np.atleast_2d(z_window), model.exo_encoder.activation)
        return dmdcore.dmdc_fit(psi[:, :-1], psi[:, 1:], xi[:, : n - 1],
                                model.effective_rank_p(), model.effective_rank())
    return dmdcore.dmd_fit(dmdcore.build_pairs(psi, np.arange(n - 1)), model.rank,
                           None if model.rank is not None else model.threshold)


def forecast_horizon(model: NdmdModel, window: np.ndarray, horizon: int,
                     z: np.ndarray | None = None, return_lifted: bool = False):
    """Decoded forecasts at offsets ``0 .. horizon-1`` from the window start.

    The spectral model is fitted on the encoded ``window`` (dropout off).  For
    control models ``z`` must hold the exogenous series from the window start
    for at least ``horizon - 1`` steps.
    """
    window = np.asarray(window, dtype=float)
    n = window.shape[1]
    if model.is_control:
        if z is None:
            raise D.ContractViolation("control models need exogenous inputs")
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] < max(horizon - 1, n):
            raise D.ContractViolation(
                f"exogenous series covers {z.shape[1]} steps, need {max(horizon - 1, n)}")
        cm = fit_spectral(model, window, z[:, :n])
        xi = mlp_apply(model.exo_encoder.weights, model.exo_encoder.biases, z,
                       model.exo_encoder.activation)
        if xi.shape[1] < 1:
            xi = np.zeros((xi.shape[0], 1))
        psihat = dmdcore.control_rollout(cm.lambdas, cm.modes, cm.amplitudes, cm.input_map,
                                         xi, horizon)
    else:
        sm = fit_spectral(model, window)
        psihat = dmdcore.spectral_rollout(sm.lambdas, sm.modes, sm.amplitudes,
                                          np.arange(horizon))
    out = decode(model, np.real(psihat))
    return (out, psihat) if return_lifted else out


# --------------------------------------------------------------------------
# training loops


def _validation_mse(model: NdmdModel, x, n_train, n_val, z=None) -> float:
    if n_val <= 0:
        return math.nan
    horizon = n_train + n_val
    zz = None if z is None else z[:, :horizon]
    pred = forecast_horizon(model, x[:, :n_train], horizon, zz)
    return float(np.mean((pred[:, n_train:] - x[:, n_train:horizon]) ** 2))


def _train_loop(model: NdmdModel, x, n_train: int, n_val: int, config: TrainConfig,
                sample: Callable, step: Callable, z=None, n_batches: int = 1):
    rng = np.random.default_rng(config.seed)
    params = model.param_arrays()
    state = AdamState.zeros_like(params)
    report = TrainReport()
    best = (math.inf, params, 0)
    wait = 0
    t0 = time.perf_counter()
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for _ in range(n_batches):
            current = model.with_arrays(params)
            try:
                res = step(current, sample(rng), rng)
            except D.ContractViolation as exc:
                # a non-finite forward pass trips the decomposition guards first
                if all(np.all(np.isfinite(p)) for p in params) and np.all(np.isfinite(x)):
                    raise
                res = None
                detail = str(exc)
            else:
                detail = res.loss
                if np.isfinite(res.loss) and all(np.all(np.isfinite(g)) for g in res.grads):
                    detail = None
            if detail is not None:
                report.stop_epoch = epoch
                report.wall_clock = time.perf_counter() - t0
                raise TrainingError(f"non-finite loss at epoch {epoch}: {detail}", report)
            report.clamp_events += res.clamp_events
            report.imag_residual = max(report.imag_residual, res.imag_residual)
            losses.append(res.loss)
            params, state = adam_step(params, res.grads, state, lr=config.lr)
        report.train_loss.append(float(np.mean(losses)))
        current = model.with_arrays(params)
        try:
            val = _validation_mse(current, x, n_train, n_val, z)
        except (D.DegenerateInputError, np.linalg.LinAlgError):
            val = math.inf
        if not np.isfinite(val):
            val = math.inf
        report.val_loss.append(val)
        score = val if n_val > 0 else report.train_loss[-1]
        if score < best[0]:
            best = (score, params, epoch)
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    report.stop_epoch = epoch if config.max_epochs > 0 else 0
    report.best_epoch = best[2]
    final = model.with_arrays(best[1])
    report.wall_clock = time.perf_counter() - t0
    try:
        report.eigenvalues = fit_spectral(final, x[:, :n_train],
                                          None if z is None else z[:, :n_train]).lambdas
    except (D.DegenerateInputError, np.linalg.LinAlgError) as exc:
        log.warning("could not fit final spectrum: %s", exc)
    return final, report


def train(model: NdmdModel, x: np.ndarray, n_train: int, n_val: int, config: TrainConfig,
          regularizer: Callable | None = None):
    """Minibatch training with early stopping on validation forecast error.

    Batches are ``config.batch_size`` distinct source timesteps drawn from the
    training split; one epoch is ``ceil((n_train - 1) / S)`` batches.  Returns
    the best-validation model and a :class:`TrainReport`.
    """
    n_pairs = n_train - 1
    s = min(config.batch_size, n_pairs)
    if s < 2:
        raise D.ContractViolation("training split too short for a batch")
    n_batches = math.ceil(n_pairs / s)

    def sample(rng):
        return np.sort(rng.choice(n_pairs, size=s, replace=False))

    def step(m, taus, rng):
        return ndmd_step_loss(m, x, taus, dropout=config.dropout, rng=rng,
                              regularizer=regularizer)

    return _train_loop(model, x, n_train, n_val, config, sample, step, n_batches=n_batches)


def train_with_aux(model: NdmdModel, x: np.ndarray, n_train: int, n_val: int,
                   config: TrainConfig, target_eigenvalues):
    """:func:`train` with ``beta * chamfer_eig(Lambda, target)`` added to each step."""
    reg = None
    if config.beta > 0:
        reg = chamfer_regularizer(target_eigenvalues, config.beta)
    return train(model, x, n_train, n_val, config, regularizer=reg)


def train_control(model: NdmdModel, x: np.ndarray, z: np.ndarray, n_train: int, n_val: int,
                  config: TrainConfig):
    """Window-sampled training of the control variant."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    window = min(config.batch_size, n_train - 1)
    n_starts = n_train - window
    n_batches = math.ceil((n_train - 1) / window)

    def sample(rng):
        return int(rng.integers(n_starts))

    def step(m, tau, rng):
        return ndmdc_step_loss(m, x, z, tau, window, dropout=config.dropout, rng=rng)

    return _train_loop(model, x, n_train, n_val, config, sample, step, z=z,
                       n_batches=n_batches)
