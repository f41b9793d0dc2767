"""Two-oscillator benchmark: plain NDMD against NDMD with the eigenvalue regularizer.

    python3 scripts/run_regularized.py --seeds 5 --beta 10
"""
import argparse

from neuraldmd import harness as H


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--beta", type=float, default=None, help="regularizer weight")
    ap.add_argument("--out", default="runs/regularized")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    overrides = {}
    if args.beta is not None:
        overrides["train"] = {"beta": args.beta}
    records = H.run_preset("5.2", range(args.seeds), args.out, args.jobs, **overrides)
    print(H.report_markdown(records, "eigenvalue regularizer"))


if __name__ == "__main__":
    main()
