"""Multi-seed training comparisons used by the acceptance gates and scripts/."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from softgrad import algos, config
from softgrad.envs import make_task

log = logging.getLogger(__name__)


@dataclass
class SeedResult:
    algo: str
    seed: int
    final_return: float
    train_return: float
    wall_seconds: float


def train_and_evaluate(cfg: config.RunConfig) -> SeedResult:
    task = make_task(cfg.run.task, cfg.task)
    t0 = time.perf_counter()
    tr = algos.Trainer(task, cfg.algo, seed=cfg.run.seed)
    m = {"return_mean": float("nan")}
    for _ in range(cfg.algo.iterations):
        m = tr.train_iteration()
    R = algos.evaluate_policy(task, tr.policy, tr.actor_params, cfg.run.eval_episodes, cfg.run.eval_seed,
                              cfg.run.deterministic_eval)
    res = SeedResult(cfg.algo.algo, cfg.run.seed, float(R.mean()), m["return_mean"], time.perf_counter() - t0)
    log.info("%s seed %d: eval %.4g (%.0f s)", res.algo, res.seed, res.final_return, res.wall_seconds)
    return res


def run_seeds(base: config.RunConfig, algo: str, seeds) -> list[SeedResult]:
    return [train_and_evaluate(config.with_run(base, algo=algo, seed=s)) for s in seeds]


def summarize(results: list[SeedResult]) -> tuple[float, float]:
    """Mean final return and its 95% half-width over seeds."""
    return algos.mean_ci([r.final_return for r in results])


def ordering(a: list[SeedResult], b: list[SeedResult]) -> str:
    """'holds' if mean(a) >= mean(b), 'overlap' if reversed but the 95% intervals touch, else 'reversed'."""
    ma, ca = summarize(a)
    mb, cb = summarize(b)
    if ma >= mb:
        return "holds"
    return "overlap" if ma + ca >= mb - cb else "reversed"


def trajopt_return(cfg: config.RunConfig) -> float:
    """Eval-protocol return of the open-loop sequence TrajOpt finds for ``cfg``'s task."""
    task = make_task(cfg.run.task, cfg.task)
    t = cfg.trajopt
    res = algos.trajopt_optimize(task, t.num_envs, t.epochs, t.horizon, t.lr, tuple(t.betas), t.grad_clip,
                                 seed=cfg.run.seed)
    return float(np.mean(algos.evaluate_sequence(task, res.actions, cfg.run.eval_episodes, cfg.run.eval_seed)))
