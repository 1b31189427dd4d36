"""``softgrad`` command line: train, eval, gradcheck, loss-surface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from softgrad import algos, config, nets
from softgrad.checks import COMPONENTS, run_component
from softgrad.envs import make_task

log = logging.getLogger("softgrad")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="softgrad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a policy and write metrics.csv plus checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    t.add_argument("--out-dir", default="runs/latest")
    t.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    t.add_argument("--iterations", type=int, default=None, help="overrides algo.iterations")

    e = sub.add_parser("eval", help="evaluate a checkpoint's deterministic policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=16)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", default=None, help="model config; defaults to the one stored in the checkpoint")
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of tanh(mu)")
    e.add_argument("--out-dir", default=None)

    g = sub.add_parser("gradcheck", help="finite-difference checks for one component")
    g.add_argument("component", help=f"one of {', '.join(COMPONENTS)}")
    g.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("loss-surface", help="return on a 2-D slice of policy parameter space")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--grid", type=int, default=11)
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--episodes", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", default=None)
    s.add_argument("--out-dir", default=".")
    return p


# ---------------------------------------------------------------------------
# helpers

def make_trainer(cfg: config.RunConfig) -> algos.Trainer:
    task = make_task(cfg.run.task, cfg.task)
    return algos.Trainer(task, cfg.algo, seed=cfg.run.seed)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_rows(path: Path, fields, rows, append: bool):
    new = not append or not path.exists()
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])


def _truncate_metrics(path: Path, iteration: int):
    """Drop rows past ``iteration`` so a resumed run continues the file cleanly."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= iteration]
    path.write_text("".join(keep))


def load_run(checkpoint, config_path=None):
    arrays, meta = nets.load_checkpoint(checkpoint)
    if config_path:
        cfg = config.load_config(config_path)
    elif "config" in meta:
        cfg = config.from_dict(meta["config"])
    else:
        raise config.ConfigError("checkpoint carries no config; pass --config")
    trainer = make_trainer(cfg)
    algos.load_params(trainer, arrays)
    return cfg, trainer, meta


def symlog(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def filter_normalized_direction(params: dict, rng) -> dict:
    """Random direction with each tensor rescaled to its parameter tensor's norm."""
    out = {}
    for k in sorted(params):
        p = params[k]
        d = rng.standard_normal(p.shape)
        dn = np.linalg.norm(d)
        out[k] = d * (np.linalg.norm(p) / dn) if dn > 0 else d
    return out


def loss_surface(task, policy, params, grid: int, radius: float, episodes: int, seed: int,
                 deterministic=True):
    """Rows (u, v, return, symlog_return) over a grid x grid slice centred on ``params``."""
    rng = np.random.default_rng(seed)
    d1 = filter_normalized_direction(params, rng)
    d2 = filter_normalized_direction(params, rng)
    coords = np.linspace(-radius, radius, grid) if grid > 1 else np.zeros(1)
    rows = []
    for u in coords:
        for v in coords:
            p = {k: params[k] + u * d1[k] + v * d2[k] for k in params}
            R = float(np.mean(algos.evaluate_policy(task, policy, p, episodes, seed, deterministic)))
            rows.append({"u": float(u), "v": float(v), "return": R, "symlog_return": float(symlog(R))})
    return rows


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = config.load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.iterations is not None:
        cfg.algo.iterations = args.iterations
    logging.getLogger().setLevel(cfg.run.log_level)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(cfg)
    metrics = out / "metrics.csv"
    timing = out / "timing.csv"
    resume = False
    if args.checkpoint:
        trainer.load(args.checkpoint)
        resume = True
        _truncate_metrics(metrics, trainer.iteration)
        _truncate_metrics(timing, trainer.iteration)
        log.info("resumed from %s at iteration %d", args.checkpoint, trainer.iteration)
    (out / "config.ini").write_text(config.dump(cfg))
    meta_cfg = cfg.to_dict()
    first = True
    t0 = time.perf_counter()
    while trainer.iteration < cfg.algo.iterations:
        m = trainer.train_iteration()
        _write_rows(metrics, algos.METRIC_FIELDS, [m], append=resume or not first)
        _write_rows(timing, ("iteration", "wall_seconds"),
                    [{"iteration": m["iteration"], "wall_seconds": time.perf_counter() - t0}],
                    append=resume or not first)
        first = False
        log.info("iter %d return %.4g entropy %.3g alpha %.3g actor %.4g critic %.4g", m["iteration"],
                 m["return_mean"], m["entropy_mean"], m["alpha"], m["actor_loss"], m["critic_loss"])
        if m["iteration"] % cfg.run.checkpoint_every == 0 or m["iteration"] == cfg.algo.iterations:
            _save(trainer, out / f"ckpt_{m['iteration']:06d}.sgck", meta_cfg)
    _save(trainer, out / "final.sgck", meta_cfg)
    R = algos.evaluate_policy(trainer.task, trainer.policy, trainer.actor_params, cfg.run.eval_episodes,
                              cfg.run.eval_seed, cfg.run.deterministic_eval)
    mean, ci = algos.mean_ci(R)
    (out / "eval.json").write_text(json.dumps({"mean": mean, "ci95": ci, "episodes": len(R)}, indent=2))
    print(f"final eval return {mean:.6g} +- {ci:.3g} ({len(R)} episodes)")
    return EXIT_OK


def _save(trainer, path, meta_cfg):
    arrays, meta = trainer.state()
    meta["config"] = meta_cfg
    nets.save_checkpoint(path, arrays, meta)


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    cfg, trainer, _ = load_run(args.checkpoint, args.config)
    R = algos.evaluate_policy(trainer.task, trainer.policy, trainer.actor_params, args.episodes, args.seed,
                              deterministic=not args.stochastic)
    mean, ci = algos.mean_ci(R)
    print(f"return {mean:.10g} +- {ci:.6g} (95% CI, {len(R)} episodes, seed {args.seed})")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "eval.json").write_text(
            json.dumps({"mean": mean, "ci95": ci, "episodes": len(R), "returns": R.tolist()}, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.component not in COMPONENTS:
        raise UsageError(f"unknown component {args.component!r}; choose from {', '.join(COMPONENTS)}")
    results = run_component(args.component, args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_loss_surface(args) -> int:
    if args.grid < 1:
        raise UsageError("--grid must be >= 1")
    if args.radius < 0 or not math.isfinite(args.radius):
        raise UsageError("--radius must be a finite number >= 0")
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    cfg, trainer, _ = load_run(args.checkpoint, args.config)
    rows = loss_surface(trainer.task, trainer.policy, trainer.actor_params, args.grid, args.radius,
                        args.episodes, args.seed, cfg.run.deterministic_eval)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "loss_surface.csv", ("u", "v", "return", "symlog_return"), rows, append=False)
    print(f"wrote {len(rows)} cells to {out / 'loss_surface.csv'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "loss-surface": cmd_loss_surface}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"softgrad: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, config.ConfigError, nets.CheckpointError) as e:
        print(f"softgrad: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"softgrad: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report any runtime failure with exit code 1
        log.exception("runtime failure")
        print(f"softgrad: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
