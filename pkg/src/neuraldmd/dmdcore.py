"""Exact DMD and DMD with control.

The fitting helpers are written against :mod:`neuraldmd.diffla`, so the same
functions run on plain arrays (closed-form baselines) and on tape variables
(the differentiable layer inside NDMD).

Timesteps are 0-based column indices into the series.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from . import diffla as D

DEFAULT_THRESHOLD = 1e-3
SNAPSHOT_FLOOR = 1e-12


class IdentifiabilityWarning(UserWarning):
    """Input matrix cannot be identified from the exogenous data."""


@dataclass
class SnapshotPair:
    psi1: Any
    psi2: Any
    taus: np.ndarray


def build_pairs(series, taus: Sequence[int]) -> SnapshotPair:
    """Columns ``taus`` and ``taus + 1`` of a K x T series, in the given order."""
    taus = np.asarray(taus, dtype=np.int64)
    T = D.value_of(series).shape[1]
    if taus.ndim != 1 or taus.size == 0:
        raise D.ContractViolation("taus must be a non-empty 1-d list")
    if taus.min() < 0 or taus.max() > T - 2:
        raise D.ContractViolation(f"timesteps must lie in [0, {T - 2}]")
    return SnapshotPair(series[:, taus], series[:, taus + 1], taus)


def _check_rank(sigma, what: str) -> None:
    s = D.value_of(sigma)
    if s[0] <= 0 or s[-1] <= SNAPSHOT_FLOOR * s[0]:
        raise D.DegenerateInputError(f"{what} is rank deficient at the requested rank")


def _scaled_right(psi2, svd: D.SvdResult):
    """Psi2 V Sigma^-1."""
    return (psi2 @ svd.v) * D.reshape(1.0 / svd.sigma, (1, -1))


def spectral_core(psi1, psi2, rank: int | None = None, threshold: float | None = None):
    """Reduced operator, eigenvalues and modes of exact DMD.

    Returns ``(a_tilde, lambdas, modes, rank)``; a threshold is used when no
    explicit rank is given.
    """
    if rank is None and threshold is None:
        threshold = DEFAULT_THRESHOLD
    svd = D.svd_truncated(psi1, rank=rank, threshold=None if rank is not None else threshold)
    _check_rank(svd.sigma, "snapshot matrix")
    w = _scaled_right(psi2, svd)
    a_tilde = svd.u.T @ w
    e = D.eig(a_tilde)
    return a_tilde, e.lambdas, w @ e.y, svd.rank


def amplitudes(modes, psi_anchor):
    return D.pinv(modes) @ psi_anchor


def spectral_rollout(lambdas, modes, alpha, offsets):
    """Lifted forecasts ``Phi Lambda^offset alpha`` as columns, one per offset."""
    powers = D.diag_power(lambdas, np.asarray(offsets, dtype=np.int64))
    return modes @ (powers * D.reshape(alpha, (-1, 1)))


@dataclass
class SpectralModel:
    lambdas: np.ndarray
    modes: np.ndarray
    amplitudes: np.ndarray
    anchor: int
    rank: int
    a_tilde: np.ndarray | None = None


def dmd_fit(pair: SnapshotPair, rank: int | None = None,
            threshold: float | None = None) -> SpectralModel:
    """Exact DMD anchored at the earliest sampled timestep."""
    psi1 = np.asarray(pair.psi1, dtype=float)
    psi2 = np.asarray(pair.psi2, dtype=float)
    if rank is not None and rank > min(psi1.shape):
        raise D.ContractViolation(f"rank {rank} exceeds min{psi1.shape}")
    a_tilde, lam, modes, r = spectral_core(psi1, psi2, rank, threshold)
    first = int(np.argmin(pair.taus))
    alpha = amplitudes(modes, psi1[:, first])
    return SpectralModel(lam, modes, alpha, int(pair.taus[first]), r, a_tilde)


def dmd_forecast(model: SpectralModel, t: int) -> np.ndarray:
    """Complex lifted forecast at absolute timestep ``t >= anchor``."""
    if t < model.anchor:
        raise D.ContractViolation(f"cannot forecast t={t} before anchor {model.anchor}")
    return spectral_rollout(model.lambdas, model.modes, model.amplitudes, [t - model.anchor])[:, 0]


def fit_series(series, rank=None, threshold=None) -> SpectralModel:
    """DMD on all consecutive pairs of a K x T series."""
    T = np.shape(series)[1]
    return dmd_fit(build_pairs(np.asarray(series, float), np.arange(T - 1)), rank, threshold)


# --------------------------------------------------------------------------
# control


def control_core(psi1, psi2, xi1, rank_p: int, rank_r: int):
    """DMDc algebra on consecutive snapshots.

    Returns a dict with ``lambdas``, ``modes``, ``b_hat``, ``a_hat``, ``a_tilde``.
    """
    k = D.value_of(psi1).shape[0]
    omega = D.concat([psi1, xi1], axis=0)
    svd = D.svd_truncated(omega, rank=rank_p)
    _check_rank(svd.sigma, "stacked state/input matrix")
    u1 = svd.u[:k]
    u2 = svd.u[k:]
    w = _scaled_right(psi2, svd)
    out_svd = D.svd_truncated(psi2, rank=rank_r)
    _check_rank(out_svd.sigma, "shifted snapshot matrix")
    u_hat = out_svd.u
    core = w @ (u1.T @ u_hat)
    a_tilde = u_hat.T @ core
    e = D.eig(a_tilde)
    return {
        "lambdas": e.lambdas,
        "modes": core @ e.y,
        "b_hat": w @ u2.T,
        "a_hat": w @ u1.T,
        "a_tilde": a_tilde,
    }


def control_rollout(lambdas, modes, alpha, input_map, xi, n_steps: int):
    """Lifted forecasts for offsets ``0 .. n_steps-1`` from the anchor.

    ``xi`` holds the encoded inputs at offsets ``0 .. n_steps-2`` as columns;
    offset ``t`` receives ``sum_{s<t} Lambda^(t-s-1) input_map xi_s``.
    """
    free = spectral_rollout(lambdas, modes, alpha, np.arange(n_steps))
    if n_steps < 2:
        return free
    t = np.arange(n_steps)[:, None]
    s = np.arange(n_steps - 1)[None, :]
    lag = t - s - 1
    mask = (lag >= 0).astype(float)
    powers = D.diag_power(lambdas, np.maximum(lag, 0)) * mask[None]
    drive = input_map @ xi[:, : n_steps - 1]
    r = D.value_of(lambdas).shape[0]
    coeff = D.sum_(powers * D.reshape(drive, (r, 1, n_steps - 1)), axis=2)
    return free + modes @ coeff


@dataclass
class ControlModel:
    lambdas: np.ndarray
    modes: np.ndarray
    amplitudes: np.ndarray
    b_hat: np.ndarray
    input_map: np.ndarray
    a_hat: np.ndarray
    rank_p: int
    rank_r: int
    anchor: int = 0


def dmdc_fit(psi1, psi2, xi1, rank_p: int, rank_r: int, anchor: int = 0) -> ControlModel:
    """DMD with control on consecutive snapshots starting at ``anchor``."""
    psi1 = np.asarray(psi1, float)
    psi2 = np.asarray(psi2, float)
    xi1 = np.atleast_2d(np.asarray(xi1, float))
    k, n_snap = psi1.shape
    n_in = xi1.shape[0]
    if psi2.shape != psi1.shape or xi1.shape[1] != n_snap:
        raise D.ContractViolation("psi1, psi2 and xi1 must share the snapshot count")
    if rank_p > min(k + n_in, n_snap) or rank_r > min(k, n_snap):
        raise D.ContractViolation("requested ranks exceed the data dimensions")
    if np.linalg.norm(xi1) <= 1e-12 * max(np.linalg.norm(psi1), 1e-300):
        warnings.warn("exogenous series is zero; input matrix is not identifiable",
                      IdentifiabilityWarning, stacklevel=2)
        rank_p = min(rank_p, int(np.linalg.matrix_rank(psi1)))
    parts = control_core(psi1, psi2, xi1, rank_p, rank_r)
    modes = parts["modes"]
    phi_pinv = D.pinv(modes)
    return ControlModel(
        lambdas=parts["lambdas"],
        modes=modes,
        amplitudes=phi_pinv @ psi1[:, 0],
        b_hat=parts["b_hat"],
        input_map=phi_pinv @ parts["b_hat"],
        a_hat=parts["a_hat"],
        rank_p=rank_p,
        rank_r=rank_r,
        anchor=anchor,
    )


def dmdc_forecast(model: ControlModel, xi, t: int) -> np.ndarray:
    """Complex lifted forecast at absolute timestep ``t``.

    ``xi`` is indexed by absolute timestep and must cover ``anchor .. t-1``.
    """
    if t < model.anchor:
        raise D.ContractViolation(f"cannot forecast t={t} before anchor {model.anchor}")
    xi = np.atleast_2d(np.asarray(xi, float))
    if xi.shape[1] < t:
        raise D.ContractViolation(f"exogenous inputs cover {xi.shape[1]} steps, need {t}")
    n = t - model.anchor + 1
    window = xi[:, model.anchor:t]
    if window.shape[1] == 0:
        window = np.zeros((xi.shape[0], 1))
    out = control_rollout(model.lambdas, model.modes, model.amplitudes, model.input_map,
                          window, n)
    return out[:, -1]


def edmd_lift(x) -> np.ndarray:
    """Append all pairwise products ``x_i x_j`` (i <= j); works on vectors or column batches."""
    x = np.asarray(x, dtype=float)
    vec = x.ndim == 1
    cols = x[:, None] if vec else x
    i, j = np.triu_indices(cols.shape[0])
    out = np.concatenate([cols, cols[i] * cols[j]], axis=0)
    return out[:, 0] if vec else out
