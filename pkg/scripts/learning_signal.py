"""Trained vs untrained encoder on the desk-linear stream, paired by seed.

Writes one CSV row per seed with AMI_max before and after training.

    python3 scripts/learning_signal.py --seeds 5 --steps 1500 --out runs/learning_signal
"""

import argparse
import csv
from pathlib import Path

from streamproto.cli import heldout_episodes, initial_params, run_eval, run_train
from streamproto.config import resolve


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--profile", default="desk-linear")
    ap.add_argument("--out", default="runs/learning_signal")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in range(args.seeds):
        cfg = resolve(profile=args.profile, seed=seed, overrides=[f"train.total_steps={args.steps}"])
        eps = heldout_episodes(cfg)
        before = run_eval(cfg, initial_params(cfg), eps, "unsupervised", sweep_alpha=True)
        state = run_train(cfg, out / f"seed{seed}")
        after = run_eval(cfg, state.params, eps, "unsupervised", sweep_alpha=True)
        rows.append({"seed": seed, "ami_max_init": before["ami_max"], "ami_max_trained": after["ami_max"],
                     "alpha_trained": after["ami_max_alpha"], "gain": after["ami_max"] - before["ami_max"]})
        print(f"seed {seed}: {before['ami_max']:.3f} -> {after['ami_max']:.3f}")
    with open(out / "learning_signal.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"mean gain {sum(r['gain'] for r in rows) / len(rows):.3f}; wrote {out / 'learning_signal.csv'}")


if __name__ == "__main__":
    main()
