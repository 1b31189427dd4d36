"""Train several algorithms over several seeds from one config and tabulate final returns.

    python3 scripts/compare_algos.py configs/pendulum.ini --algos sapo shac apg --seeds 0 1 2 3 4
"""

import argparse
import csv
import logging
from pathlib import Path

from softgrad import config, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--algos", nargs="+", default=["sapo", "shac", "apg"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default=None, help="CSV of per-seed results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    base = config.load_config(args.config)
    runs = {a: experiments.run_seeds(base, a, args.seeds) for a in args.algos}
    for a, res in runs.items():
        m, ci = experiments.summarize(res)
        print(f"{a:5s} final return {m:10.4f} +- {ci:.4f}  seeds: " +
              " ".join(f"{r.final_return:.3f}" for r in res))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["algo", "seed", "final_return", "train_return", "wall_seconds"])
            for res in runs.values():
                for r in res:
                    w.writerow([r.algo, r.seed, r.final_return, r.train_return, round(r.wall_seconds, 1)])


if __name__ == "__main__":
    main()
