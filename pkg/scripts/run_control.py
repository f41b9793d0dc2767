"""Forced oscillator: NDMD with and without the exogenous-input branch.

    python3 scripts/run_control.py --seeds 5
"""
import argparse

from neuraldmd import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/control")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    records = H.run_preset("5.3", range(args.seeds), args.out, args.jobs)
    print(H.report_markdown(records, "control inputs"))
    for r in records:
        eigs = ", ".join(f"{a:+.3f}{b:+.3f}i" for a, b in r.eigenvalues)
        print(f"{r.model:6s} seed {r.seed}  {eigs}")


if __name__ == "__main__":
    main()
