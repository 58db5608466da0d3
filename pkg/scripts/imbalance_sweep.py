"""Relative AMI as the share of distractor frames grows.

Each rate trains its own encoder on the contaminated stream; evaluation
always uses clean held-out episodes.  Prints the curve and writes sweep.csv.

    python3 scripts/imbalance_sweep.py --rates 0,0.25,0.5,0.75,0.9 --out runs/imbalance
"""

import argparse

from streamproto.cli import run_sweep
from streamproto.config import resolve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", default="0,0.25,0.5,0.75,0.9")
    ap.add_argument("--profile", default="desk-linear")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/imbalance")
    args = ap.parse_args()

    overrides = [] if args.steps is None else [f"train.total_steps={args.steps}"]
    cfg = resolve(profile=args.profile, seed=args.seed, overrides=overrides)
    rates = [float(r) for r in args.rates.split(",")]
    rows = run_sweep(cfg, "distractor_rate", rates, args.out, workers=args.workers)
    for r in rows:
        bar = "#" * int(round(40 * max(r["relative_ami"], 0.0)))
        print(f"{r['value']:5.2f}  {r['relative_ami']:6.3f}  {bar}")


if __name__ == "__main__":
    main()
