"""Open-loop TrajOpt baseline for a config's task, scored with the config's eval protocol.

    python3 scripts/trajopt_baseline.py configs/point_mass_sapo.ini
"""

import argparse

from softgrad import config, experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    args = ap.parse_args()
    cfg = config.load_config(args.config)
    print(f"TrajOpt eval return on {cfg.run.task}: {experiments.trajopt_return(cfg):.6g}")


if __name__ == "__main__":
    main()
