"""Oscillator benchmark: NDMD against full and rank-2 DMD on a GP-lifted 10-d series.

    python3 scripts/run_eigen_recovery.py --seeds 5 --out runs/oscillator
"""
import argparse

from neuraldmd import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/oscillator")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    records = H.run_preset("5.1", range(args.seeds), args.out, args.jobs)
    print(H.report_markdown(records, "oscillator eigenvalue recovery"))
    for r in records:
        print(f"{r.model:12s} seed {r.seed}  chamfer {r.chamfer:.4f}")


if __name__ == "__main__":
    main()
