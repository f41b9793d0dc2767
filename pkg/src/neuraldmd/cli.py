"""Command line entry point: ``neuraldmd {generate,train,eval,experiment,eigenplot}``.

Exit status is 0 on success, 1 on a usage error and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import baselines as BL
from . import diffla as D
from . import harness as H
from . import ndmd
from . import synthgen as S

PRESETS = ("5.1", "5.2", "5.3", "hd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neuraldmd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, preset=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="key = value file with [experiment]/[train] sections")
        sp.add_argument("--out", required=True, help="output directory")
        if preset:
            sp.add_argument("--preset", choices=PRESETS)
            sp.add_argument("--obs-dim", type=int)

    g = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    common(g)

    t = sub.add_parser("train", help="train or fit one model; writes checkpoint and record")
    common(t)
    t.add_argument("--data", help="dataset manifest (instead of --preset)")
    t.add_argument("--model", default="NDMD")
    t.add_argument("--hidden", type=int, help="MLP width (presets use 64)")

    e = sub.add_parser("eval", help="score an NDMD checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write metrics.json here instead of stdout")

    x = sub.add_parser("experiment", help="multi-seed preset run")
    common(x)
    x.add_argument("--seeds", type=int, default=1, help="run seeds 0..N-1 (offset by --seed)")
    x.add_argument("--models", help="comma separated subset of the preset's models")
    x.add_argument("--obs-dims", help="comma separated M values for the hd preset")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--hidden", type=int, help="MLP width (presets use 64)")

    ep = sub.add_parser("eigenplot", help="eigenvalue scatter data as CSV")
    ep.add_argument("--results", required=True, help="results.json (or a directory holding one)")
    ep.add_argument("--out", help="CSV path; stdout when omitted")
    return p


def _overrides(args) -> dict:
    ov = {}
    if getattr(args, "config", None):
        try:
            ov = H.read_config(args.config)
        except (ValueError, OSError, KeyError) as exc:
            raise UsageError(f"bad config file: {exc}") from exc
    if getattr(args, "hidden", None):
        ov["hidden"] = args.hidden
    return ov


def _need_preset(args):
    if not args.preset:
        raise UsageError("--preset is required")
    return args.preset


def cmd_generate(args) -> None:
    name = _need_preset(args)
    ov = _overrides(args)
    gp = {"lengthscale": ov["gp_lengthscale"]} if ov.get("gp_lengthscale") else None
    if gp is None and name in H.PRESET_DEFAULTS and "gp_lengthscale" in H.PRESET_DEFAULTS[name]:
        gp = {"lengthscale": H.PRESET_DEFAULTS[name]["gp_lengthscale"]}
    ts = S.preset(name, args.seed, obs_dim=args.obs_dim or ov.get("obs_dim"), gp=gp,
                  noise=ov.get("noise"))
    path = S.write_dataset(args.out, ts, dict(ts.meta))
    print(path)


def _spec_for(args, model, data=None) -> H.ExperimentSpec:
    ov = _overrides(args)
    ov.pop("model", None)
    preset = args.preset
    if data is not None:
        meta = S.read_dataset(data).meta
        preset = preset or meta.get("preset")
        ov["data"] = str(data)
    if args.obs_dim:
        ov["obs_dim"] = args.obs_dim
    if preset in H.PRESET_DEFAULTS:
        return H.preset_spec(preset, model, args.seed, out=args.out, **ov)
    if data is None:
        raise UsageError("--preset or --data is required")
    train = ndmd.TrainConfig(**{**ov.pop("train", {}), "seed": args.seed})
    return H.ExperimentSpec(preset=None, model=model, seed=args.seed, train=train,
                            out=args.out, **ov)


def cmd_train(args) -> None:
    if args.data and args.preset:
        raise UsageError("give either --data or --preset, not both")
    if args.model not in H.MODEL_KINDS:
        raise UsageError(f"unknown model {args.model!r}")
    spec = _spec_for(args, args.model, args.data)
    rec = H.run_experiment(spec)
    print(json.dumps({k: v for k, v in rec.to_dict().items() if k != "eigenvalues"}))


def cmd_eval(args) -> None:
    model, header = ndmd.NdmdModel.load(args.checkpoint)
    ts = S.read_dataset(args.data)
    n_train, n_val, n_test = ts.split_bounds()
    scaler = S.Standardizer(np.asarray(header["mean"]), np.asarray(header["std"]))
    z = None
    if ts.z is not None and header.get("z_mean") is not None:
        z = S.Standardizer(np.asarray(header["z_mean"]), np.asarray(header["z_std"])).transform(ts.z)
    zs = None if header.get("z_mean") is None else S.Standardizer(
        np.asarray(header["z_mean"]), np.asarray(header["z_std"]))
    prep = H.Prepared(ts, scaler.transform(ts.x), z, scaler, zs, n_train, n_val, n_test)
    window = prep.x[:, :n_train]
    sm = ndmd.fit_spectral(model, window, None if z is None else z[:, :n_train])
    metrics = {"eigenvalues": H._eig_list(sm.lambdas)}
    if ts.true_eigenvalues is not None:
        metrics["chamfer"] = ndmd.chamfer_eig(sm.lambdas, ts.true_eigenvalues)
    if n_test > 0:
        metrics["test_mse"] = H.evaluate(BL.NdmdForecaster(model), prep)
    text = json.dumps(metrics, indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(text)
    else:
        print(text)


def cmd_experiment(args) -> None:
    name = _need_preset(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    ov = _overrides(args)
    ov.pop("model", None)
    models = tuple(args.models.split(",")) if args.models else None
    if models:
        for m in models:
            if m not in H.MODEL_KINDS:
                raise UsageError(f"unknown model {m!r}")
    dims = None
    if args.obs_dims:
        dims = tuple(int(v) for v in args.obs_dims.split(","))
    elif args.obs_dim:
        dims = (args.obs_dim,)
        if name != "hd":
            ov["obs_dim"] = args.obs_dim
    seeds = range(args.seed, args.seed + args.seeds)
    records = H.run_preset(name, seeds, args.out, args.jobs, models, dims, **ov)
    sys.stdout.write(H.report_markdown(records, f"preset {name}"))


def cmd_eigenplot(args) -> None:
    path = Path(args.results)
    if path.is_dir():
        path = path / "results.json"
    records = H.read_results(path)
    if args.out:
        n = H.write_eigen_csv(args.out, records)
        print(f"{n} rows -> {args.out}")
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["model", "seed", "obs_dim", "real", "imag"])
        for r in records:
            for re_, im in r.eigenvalues:
                w.writerow([r.model, r.seed, r.obs_dim, repr(re_), repr(im)])


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "eigenplot": cmd_eigenplot,
}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, BL.UnsupportedModelError) as exc:
        print(f"neuraldmd: error: {exc}", file=sys.stderr)
        return 1
    except (ndmd.TrainingError, D.DegenerateInputError, D.NonDiagonalizableError,
            D.ContractViolation, np.linalg.LinAlgError, ValueError, OSError, KeyError) as exc:
        print(f"neuraldmd: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
