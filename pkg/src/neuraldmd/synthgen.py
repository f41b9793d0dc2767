"""Synthetic datasets: linear latent dynamics pushed through GP-sampled maps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

A_OSC = np.array([[0.9, -0.5], [0.4, 0.9]])
A_TWO_BLOCK = np.array([
    [0.9, -0.5, 0.0, 0.0],
    [0.4, 0.9, 0.0, 0.0],
    [0.0, 0.0, 0.8, -0.5],
    [0.0, 0.0, 0.6, 0.8],
])
B_FIRST = np.array([[1.0], [0.0]])
HD_MODULUS = 1.0
HD_NOISE = 0.1


@dataclass
class LatentSystem:
    a: np.ndarray
    length: int
    b: np.ndarray | None = None
    psi0: np.ndarray | None = None

    def initial_state(self) -> np.ndarray:
        if self.psi0 is not None:
            return np.asarray(self.psi0, dtype=float)
        e = np.zeros(self.a.shape[0])
        e[0] = 1.0
        return e


def propagate_linear(sys: LatentSystem, xi=None) -> np.ndarray:
    """Iterate ``psi_{t+1} = A psi_t (+ B xi_t)`` for ``sys.length`` steps."""
    a = np.asarray(sys.a, dtype=float)
    T = int(sys.length)
    out = np.zeros((a.shape[0], T))
    out[:, 0] = sys.initial_state()
    if sys.b is not None:
        if xi is None:
            raise ValueError("an input series is required when B is set")
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if xi.shape[1] < T - 1:
            raise ValueError(f"input series has {xi.shape[1]} steps, need {T - 1}")
    for t in range(T - 1):
        nxt = a @ out[:, t]
        if sys.b is not None:
            nxt = nxt + sys.b @ xi[:, t]
        out[:, t + 1] = nxt
    return out


@dataclass
class GpLiftSpec:
    output_dim: int = 10
    lengthscale: float = 1.0
    variance: float = 1.0
    jitter: float = 1e-8
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if self.lengthscale <= 0 or self.variance < 0 or self.output_dim < 1:
            raise ValueError(f"invalid GP lift spec {self}")


def rbf_gram(u: np.ndarray, lengthscale: float, variance: float) -> np.ndarray:
    """RBF kernel between the columns of ``u``."""
    sq = np.sum(u * u, axis=0)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * u.T @ u, 0.0)
    return variance * np.exp(-d2 / (2.0 * lengthscale**2))


def gp_lift(latent: np.ndarray, spec: GpLiftSpec) -> np.ndarray:
    """Draw ``spec.output_dim`` GP sample paths over the latent trajectory (M x T)."""
    u = np.atleast_2d(np.asarray(latent, dtype=float))
    if u.shape[1] < 1:
        raise ValueError("latent series is empty")
    if spec.standardize:
        sd = u.std(axis=1, keepdims=True)
        u = (u - u.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
    gram = rbf_gram(u, spec.lengthscale, spec.variance)
    jitter = spec.jitter
    for _ in range(4):
        try:
            chol = np.linalg.cholesky(gram + jitter * np.eye(gram.shape[0]))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
    else:
        raise np.linalg.LinAlgError("Gram matrix not positive definite after jitter escalation")
    z = np.random.default_rng(spec.seed).standard_normal((gram.shape[0], spec.output_dim))
    return np.ascontiguousarray((chol @ z).T)


def gen_control_series(dim: int, length: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((dim, length))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        sd = x.std(axis=1)
        return cls(x.mean(axis=1), np.where(sd > 0, sd, 1.0))

    def transform(self, x):
        return (x - self.mean[:, None]) / self.std[:, None]

    def inverse(self, x):
        return x * self.std[:, None] + self.mean[:, None]


@dataclass
class TimeSeries:
    """Observations (M x T), optional exogenous inputs (D x T) and split sizes."""

    x: np.ndarray
    z: np.ndarray | None = None
    splits: tuple[int, int, int] | None = None
    true_eigenvalues: np.ndarray | None = None
    latent: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.x.shape[1]

    def split_bounds(self) -> tuple[int, int, int]:
        if self.splits is None:
            return self.length, 0, 0
        return tuple(self.splits)


# --------------------------------------------------------------------------
# presets


def _lift(latent, m, seed, gp_kw) -> np.ndarray:
    return gp_lift(latent, GpLiftSpec(output_dim=m, seed=seed, **(gp_kw or {})))


def preset(name: str, seed: int = 0, obs_dim: int | None = None, gp: dict | None = None,
           noise: float | None = None, modulus: float | None = None) -> TimeSeries:
    """Datasets mirroring the synthetic experiments.

    ``"5.1"`` oscillator, ``"5.2"`` two oscillators, ``"5.3"`` oscillator with
    Gaussian input, ``"hd"`` oscillator observed through many noisy GP outputs.
    ``noise`` is the std of white observation noise added after the lift and
    ``modulus`` rescales the hd latent matrix to that eigenvalue modulus.
    """
    rng = np.random.default_rng(seed)
    data_seed = int(rng.integers(2**31))
    meta = {"preset": name, "seed": seed}
    if name == "5.1":
        lat = propagate_linear(LatentSystem(A_OSC, 80))
        x, eig, z, splits = _lift(lat, obs_dim or 10, data_seed, gp), np.linalg.eigvals(A_OSC), None, (70, 10, 0)
    elif name == "5.2":
        lat = propagate_linear(LatentSystem(A_TWO_BLOCK, 100,
                                            psi0=np.array([1.0, 0.0, 1.0, 0.0]) / np.sqrt(2)))
        x, eig, z, splits = _lift(lat, obs_dim or 10, data_seed, gp), np.linalg.eigvals(A_TWO_BLOCK), None, (70, 10, 20)
    elif name == "5.3":
        T = 160
        z = gen_control_series(1, T, int(rng.integers(2**31)))
        lat = propagate_linear(LatentSystem(A_OSC, T, b=B_FIRST), z)
        x, eig, splits = _lift(lat, obs_dim or 10, data_seed, gp), np.linalg.eigvals(A_OSC), (140, 20, 0)
    elif name == "hd":
        T = 151
        mod = HD_MODULUS if modulus is None else modulus
        a = A_OSC * (mod / np.sqrt(np.linalg.det(A_OSC)))
        lat = propagate_linear(LatentSystem(a, T))
        x, eig, z = _lift(lat, obs_dim or 20, data_seed, gp), np.linalg.eigvals(a), None
        n_train, n_val = int(0.7 * T), int(0.1 * T)
        splits = (n_train, n_val, T - n_train - n_val)
        noise = HD_NOISE if noise is None else noise
        meta.update(obs_dim=x.shape[0], modulus=mod,
                    substitute="synthetic stand-in for subsampled wake fields")
    else:
        raise ValueError(f"unknown preset {name!r}")
    if noise:
        x = x + noise * np.random.default_rng(data_seed + 1).standard_normal(x.shape)
        meta["noise"] = noise
    return TimeSeries(x, z, splits, eig, lat, meta)


# --------------------------------------------------------------------------
# CSV / manifest I/O


def write_series(path, x: np.ndarray, prefix: str = "x") -> None:
    """One row per dimension, one column per timestep; header lists timestep indices."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dim"] + [str(t) for t in range(x.shape[1])])
        for i, row in enumerate(x):
            w.writerow([f"{prefix}{i}"] + [repr(float(v)) for v in row])


def read_series(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if len(header) < 2:
        raise ValueError(f"{path}: header has no timestep columns")
    if not body:
        raise ValueError(f"{path}: zero-length series (header only)")
    n = len(header) - 1
    out = np.empty((len(body), n))
    for i, r in enumerate(body):
        if len(r) != n + 1:
            raise ValueError(f"{path}: row {i + 1} has {len(r) - 1} values, expected {n}")
        try:
            out[i] = [float(v) for v in r[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}: malformed number in row {i + 1}") from exc
    return out


def _complex_list(v):
    return None if v is None else [[float(c.real), float(c.imag)] for c in np.asarray(v)]


def write_dataset(directory, ts: TimeSeries, generator: dict | None = None) -> Path:
    """Write x.csv (and z.csv) plus manifest.json; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_series(d / "x.csv", ts.x, "x")
    manifest = {
        "observations": "x.csv",
        "exogenous": None,
        "splits": list(ts.splits) if ts.splits else None,
        "true_eigenvalues": _complex_list(ts.true_eigenvalues),
        "generator": generator or ts.meta,
    }
    if ts.z is not None:
        write_series(d / "z.csv", ts.z, "z")
        manifest["exogenous"] = "z.csv"
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_dataset(manifest_path) -> TimeSeries:
    path = Path(manifest_path)
    m = json.loads(path.read_text())
    x = read_series(path.parent / m["observations"])
    z = read_series(path.parent / m["exogenous"]) if m.get("exogenous") else None
    if z is not None and z.shape[1] != x.shape[1]:
        raise ValueError("exogenous series length differs from observations")
    eig = m.get("true_eigenvalues")
    eig = None if eig is None else np.array([complex(a, b) for a, b in eig])
    splits = tuple(m["splits"]) if m.get("splits") else None
    return TimeSeries(x, z, splits, eig, None, dict(m.get("generator") or {}))
