"""Experiment runner: data, training or fitting, evaluation and result files.

Each run is a pure function of its :class:`ExperimentSpec`; the seed fixes the
dataset draw, the network initialisation and every minibatch.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as BL
from . import diffla as D
from . import ndmd
from . import synthgen as S

log = logging.getLogger(__name__)

NDMD_KINDS = ("NDMD", "NDMD+aux", "NDMDc")
MODEL_KINDS = NDMD_KINDS + BL.IN_SCOPE
CONTROL_KINDS = ("NDMDc", "DMDc", "DMDc-rank-r")
HD_OBS_DIMS = (20, 60, 200)


@dataclass
class ExperimentSpec:
    preset: str | None = "5.1"
    data: str | None = None  # manifest path; overrides preset
    model: str = "NDMD"
    seed: int = 0
    obs_dim: int | None = None
    noise: float | None = None
    gp_lengthscale: float | None = None
    splits: tuple | None = None  # fractions; None keeps the dataset's own split
    lifted_dim: int = 2
    hidden: int = 64
    n_hidden: int = 2
    rank: int | None = 2
    threshold: float = 1e-3
    rank_p: int | None = None
    exo_code_dim: int = 1
    train: ndmd.TrainConfig = field(default_factory=ndmd.TrainConfig)
    out: str | None = None

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            if self.model in BL.OUT_OF_SCOPE:
                raise BL.UnsupportedModelError(f"{self.model} is not implemented")
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.splits is not None:
            self.splits = tuple(float(s) for s in self.splits)
            if len(self.splits) != 3 or min(self.splits) < 0 or abs(sum(self.splits) - 1) > 1e-9:
                raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.splits}")
        if self.preset is None and self.data is None:
            raise ValueError("either a preset or a data manifest is required")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["splits"] = list(self.splits) if self.splits is not None else None
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ResultRecord:
    model: str
    seed: int
    eigenvalues: list  # [[re, im], ...]
    test_mse: float | None
    chamfer: float | None
    runtime: float
    config_hash: str
    preset: str | None = None
    obs_dim: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.test_mse is not None and self.test_mse < 0:
            raise ValueError("negative MSE")
        if self.chamfer is not None and self.chamfer < 0:
            raise ValueError("negative chamfer distance")

    def complex_eigenvalues(self) -> np.ndarray:
        return np.array([complex(a, b) for a, b in self.eigenvalues])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(**d)


# --------------------------------------------------------------------------
# preset defaults
#
# Width-64 networks everywhere (the 256-unit setting is available through
# ``hidden``).  Patience 200 because 1-4 minibatches per epoch make 50
# epochs too short for the slower starters.

PRESET_MODELS = {
    "5.1": ("NDMD", "DMD", "DMD-rank-r"),
    "5.2": ("NDMD", "NDMD+aux"),
    "5.3": ("NDMDc", "NDMD"),
    "hd": ("NDMD", "DMD", "EDMD", "AR", "NN-1step", "AEAR", "LKIS"),
}

PRESET_DEFAULTS = {
    "5.1": dict(lifted_dim=2, rank=2,
                train=dict(batch_size=128, dropout=0.1, max_epochs=1000, patience=200)),
    "5.2": dict(lifted_dim=4, rank=4, gp_lengthscale=2.0,
                train=dict(batch_size=32, dropout=0.0, max_epochs=1000, patience=200, beta=10.0)),
    "5.3": dict(lifted_dim=2, rank=2, rank_p=3,
                train=dict(batch_size=128, dropout=0.1, max_epochs=1000, patience=200)),
    "hd": dict(lifted_dim=4, rank=None, threshold=1e-3,
               train=dict(batch_size=128, dropout=0.0, max_epochs=2000, patience=200)),
}


def preset_spec(preset: str, model: str, seed: int = 0, **overrides) -> ExperimentSpec:
    if preset not in PRESET_DEFAULTS:
        raise ValueError(f"unknown preset {preset!r}")
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in PRESET_DEFAULTS[preset].items()}
    train = d.pop("train")
    train.update(overrides.pop("train", {}) or {})
    d.update(overrides)
    train["seed"] = seed
    return ExperimentSpec(preset=preset, model=model, seed=seed, train=ndmd.TrainConfig(**train), **d)


# --------------------------------------------------------------------------
# data


def load_data(spec: ExperimentSpec) -> S.TimeSeries:
    if spec.data is not None:
        return S.read_dataset(spec.data)
    gp = {"lengthscale": spec.gp_lengthscale} if spec.gp_lengthscale is not None else None
    return S.preset(spec.preset, spec.seed, obs_dim=spec.obs_dim, gp=gp, noise=spec.noise)


def split_counts(ts: S.TimeSeries, fractions=None) -> tuple[int, int, int]:
    T = ts.length
    if fractions is None:
        n_train, n_val, n_test = ts.split_bounds()
    else:
        n_train = int(round(fractions[0] * T))
        n_val = int(round(fractions[1] * T))
        n_test = T - n_train - n_val
    if n_train < 3:
        raise ValueError(f"training split of {n_train} steps is too short")
    return n_train, n_val, n_test


@dataclass
class Prepared:
    ts: S.TimeSeries
    x: np.ndarray
    z: np.ndarray | None
    scaler: S.Standardizer
    z_scaler: S.Standardizer | None
    n_train: int
    n_val: int
    n_test: int


def prepare(spec: ExperimentSpec, ts: S.TimeSeries | None = None) -> Prepared:
    """Standardize with training-split statistics only."""
    ts = ts if ts is not None else load_data(spec)
    n_train, n_val, n_test = split_counts(ts, spec.splits)
    scaler = S.Standardizer.fit(ts.x[:, :n_train])
    z = zs = None
    if ts.z is not None:
        zs = S.Standardizer.fit(ts.z[:, :n_train])
        z = zs.transform(ts.z)
    if spec.model in CONTROL_KINDS and z is None:
        raise D.ContractViolation(f"{spec.model} needs a dataset with exogenous inputs")
    return Prepared(ts, scaler.transform(ts.x), z, scaler, zs, n_train, n_val, n_test)


# --------------------------------------------------------------------------
# models


def build_model(spec: ExperimentSpec, obs_dim: int, exo_dim: int = 0) -> ndmd.NdmdModel:
    control = spec.model == "NDMDc"
    return ndmd.init_model(obs_dim, spec.lifted_dim, hidden=spec.hidden, n_hidden=spec.n_hidden,
                           seed=spec.seed, rank=spec.rank, threshold=spec.threshold,
                           exo_dim=exo_dim if control else 0, exo_code_dim=spec.exo_code_dim,
                           rank_p=spec.rank_p if control else None)


def fit_model(spec: ExperimentSpec, prep: Prepared):
    """Train an NDMD variant or fit a baseline; returns a forecaster."""
    x, z = prep.x, prep.z
    if spec.model in NDMD_KINDS:
        model = build_model(spec, x.shape[0], 0 if z is None else z.shape[0])
        if spec.model == "NDMDc":
            fitted, report = ndmd.train_control(model, x, z, prep.n_train, prep.n_val, spec.train)
        elif spec.model == "NDMD+aux":
            if prep.ts.true_eigenvalues is None:
                raise D.ContractViolation("NDMD+aux needs target eigenvalues in the dataset")
            fitted, report = ndmd.train_with_aux(model, x, prep.n_train, prep.n_val, spec.train,
                                                 prep.ts.true_eigenvalues)
        else:
            fitted, report = ndmd.train(model, x, prep.n_train, prep.n_val, spec.train)
        return BL.NdmdForecaster(fitted, report)
    cfg = BL.NeuralConfig(hidden=spec.hidden, n_hidden=spec.n_hidden, lifted_dim=spec.lifted_dim,
                          lr=spec.train.lr,
                          max_epochs=spec.train.max_epochs, patience=spec.train.patience,
                          seed=spec.seed)
    return BL.fit_baseline(spec.model, x, prep.n_train, prep.n_val, z, rank=spec.rank,
                           threshold=spec.threshold, config=cfg)


def evaluate(forecaster, prep: Prepared) -> float:
    """Test MSE in original units, forecasting from the end of train+validation."""
    if prep.n_test <= 0:
        raise D.ContractViolation("test split is empty")
    a = prep.n_train + prep.n_val
    zz = None
    if prep.z is not None:
        zz = prep.z
        if zz.shape[1] < a + prep.n_test - 1:
            raise D.ContractViolation("exogenous inputs do not cover the test horizon")
    pred = forecaster.predict(prep.x[:, :a], prep.n_test, zz)
    pred = prep.scaler.inverse(np.real(pred))
    truth = prep.ts.x[:, a:a + prep.n_test]
    return float(np.mean((pred - truth) ** 2))


def _eig_list(lam) -> list:
    if lam is None:
        return []
    return [[float(c.real), float(c.imag)] for c in np.asarray(lam, dtype=complex)]


def run_experiment(spec: ExperimentSpec, ts: S.TimeSeries | None = None) -> ResultRecord:
    """Data -> split -> train/fit -> evaluate; persists files when ``spec.out`` is set."""
    t0 = time.perf_counter()
    prep = prepare(spec, ts)
    out = Path(spec.out) if spec.out else None
    try:
        fc = fit_model(spec, prep)
    except ndmd.TrainingError as exc:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            rep = dataclasses.asdict(exc.report) if exc.report is not None else {}
            rep.pop("eigenvalues", None)
            (out / "failure.json").write_text(json.dumps(
                {"error": str(exc), "spec": spec.to_dict(), "report": rep}, indent=2, default=str))
        raise
    lam = getattr(fc, "eigenvalues", None)
    truth = prep.ts.true_eigenvalues
    chamfer = None
    if truth is not None and lam is not None and len(lam):
        chamfer = ndmd.chamfer_eig(np.asarray(lam), truth)
    mse = evaluate(fc, prep) if prep.n_test > 0 else None
    extra = {}
    if isinstance(fc, BL.NdmdForecaster) and fc.report is not None:
        extra = {"best_epoch": fc.report.best_epoch, "stop_epoch": fc.report.stop_epoch,
                 "clamp_events": fc.report.clamp_events}
    if prep.ts.meta.get("substitute"):
        extra["substitute"] = prep.ts.meta["substitute"]
    rec = ResultRecord(spec.model, spec.seed, _eig_list(lam), mse, chamfer,
                       time.perf_counter() - t0, spec.config_hash(),
                       spec.preset if spec.data is None else prep.ts.meta.get("preset"),
                       prep.ts.x.shape[0], extra)
    if out is not None:
        write_results(out, [rec])
        if isinstance(fc, BL.NdmdForecaster):
            fc.model.save(out / "checkpoint.json", {
                "model": spec.model, "mean": prep.scaler.mean.tolist(),
                "std": prep.scaler.std.tolist(),
                "z_mean": None if prep.z_scaler is None else prep.z_scaler.mean.tolist(),
                "z_std": None if prep.z_scaler is None else prep.z_scaler.std.tolist(),
                "splits": [prep.n_train, prep.n_val, prep.n_test],
            })
    return rec


# --------------------------------------------------------------------------
# multi-seed presets


def preset_specs(preset: str, seeds, models=None, obs_dims=None, **overrides) -> list[ExperimentSpec]:
    models = models or PRESET_MODELS[preset]
    dims = (obs_dims or HD_OBS_DIMS) if preset == "hd" else (None,)
    return [preset_spec(preset, m, s, obs_dim=d, **overrides)
            for d in dims for s in seeds for m in models]


def _run_one(spec):
    return run_experiment(spec)


def run_many(specs, jobs: int = 1) -> list[ResultRecord]:
    """Runs share nothing, so they can fan out; output order follows ``specs``."""
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_run_one, specs))
    return [_run_one(s) for s in specs]


def sort_records(records) -> list[ResultRecord]:
    return sorted(records, key=lambda r: (r.obs_dim or 0, r.model, r.seed))


def aggregate(records) -> list[dict]:
    """Median test MSE and chamfer per (model, obs_dim) over seeds."""
    groups: dict = {}
    for r in sort_records(records):
        groups.setdefault((r.model, r.obs_dim), []).append(r)
    rows = []
    for (model, m), rs in groups.items():
        mses = [r.test_mse for r in rs if r.test_mse is not None]
        chs = [r.chamfer for r in rs if r.chamfer is not None]
        rows.append({
            "model": model, "obs_dim": m, "n_seeds": len(rs),
            "median_test_mse": float(np.median(mses)) if mses else None,
            "median_chamfer": float(np.median(chs)) if chs else None,
        })
    return rows


def write_results(out, records, title: str | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records = sort_records(records)
    (out / "results.json").write_text(json.dumps([r.to_dict() for r in records], indent=2))
    write_eigen_csv(out / "eigenvalues.csv", records)
    (out / "report.md").write_text(report_markdown(records, title))


def read_results(path) -> list[ResultRecord]:
    return [ResultRecord.from_dict(d) for d in json.loads(Path(path).read_text())]


def write_eigen_csv(path, records) -> int:
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "seed", "obs_dim", "real", "imag"])
        for r in records:
            for re_, im in r.eigenvalues:
                w.writerow([r.model, r.seed, r.obs_dim if r.obs_dim is not None else "",
                            repr(re_), repr(im)])
                n += 1
    return n


def _fmt(v):
    return "-" if v is None else f"{v:.4g}"


def report_markdown(records, title=None) -> str:
    lines = [f"# {title or 'Results'}", ""]
    subs = {r.extra.get("substitute") for r in records if r.extra.get("substitute")}
    for s in sorted(subs):
        lines += [f"Data: SUBSTITUTE ({s}).", ""]
    lines += ["| model | M | seeds | median test MSE | median chamfer |",
              "|---|---|---|---|---|"]
    for row in aggregate(records):
        lines.append(f"| {row['model']} | {row['obs_dim']} | {row['n_seeds']} | "
                     f"{_fmt(row['median_test_mse'])} | {_fmt(row['median_chamfer'])} |")
    return "\n".join(lines) + "\n"


def run_preset(preset: str, seeds, out=None, jobs: int = 1, models=None, obs_dims=None,
               **overrides) -> list[ResultRecord]:
    specs = preset_specs(preset, seeds, models, obs_dims, **overrides)
    records = sort_records(run_many(specs, jobs))
    if out is not None:
        write_results(out, records, f"preset {preset}")
        agg = {"preset": preset, "seeds": list(seeds), "summary": aggregate(records)}
        (Path(out) / "aggregate.json").write_text(json.dumps(agg, indent=2))
    return records


# --------------------------------------------------------------------------
# config files
#
# INI-style key = value text with an [experiment] and a [train] section, e.g.
#
#   [experiment]
#   model = NDMD
#   lifted_dim = 4
#   [train]
#   max_epochs = 500


def _coerce(raw: str):
    s = raw.strip()
    if s.lower() in ("none", "null", ""):
        return None
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    if "," in s:
        return tuple(_coerce(p) for p in s.split(","))
    return s


def read_config(path) -> dict:
    """Parse a config file into ExperimentSpec overrides (``train`` nested)."""
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    train_known = {f.name for f in dataclasses.fields(ndmd.TrainConfig)}
    out: dict = {}
    for section in cp.sections():
        if section not in ("experiment", "train"):
            raise ValueError(f"{path}: unknown section [{section}]")
        for key, raw in cp.items(section):
            allowed = known if section == "experiment" else train_known
            if key not in allowed or key == "train":
                raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
            val = _coerce(raw)
            if section == "train":
                out.setdefault("train", {})[key] = val
            else:
                out[key] = val
    return out
