"""Batched environments with tape-connected state and per-env RNG streams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from softgrad import tape as T


@dataclass
class Observation:
    state_vec: object  # (B, D)
    point_cloud: object = None  # (B, K, 3) or None

    def detach(self) -> "Observation":
        pc = None if self.point_cloud is None else T.value(self.point_cloud)
        return Observation(T.value(self.state_vec), pc)

    def take(self, idx) -> "Observation":
        pc = None if self.point_cloud is None else self.point_cloud[idx]
        return Observation(self.state_vec[idx], pc)


@dataclass
class StepResult:
    obs: Observation
    reward: object  # (B,) tape-connected
    done: np.ndarray  # (B,) bool
    terminal_obs: Observation  # observation of the state reached, before auto-reset
    terminated: np.ndarray  # (B,) bool, done for a reason other than the time limit
    info: dict = field(default_factory=dict)


class Task:
    """Per-task physics, reward and initial-state distribution.

    States are dicts of arrays with a leading env axis.  ``dynamics`` and
    ``reward`` must be tape-polymorphic; integer-valued entries never
    carry gradients.
    """

    name = "task"
    act_dim: int
    obs_dim: int
    cloud_size = 0
    episode_length: int = 1
    frame_time: float = 1.0  # simulated seconds per env step

    def initial_state(self, rng: np.random.Generator) -> dict:
        raise NotImplementedError

    def dynamics(self, state: dict, action) -> dict:
        raise NotImplementedError

    def reward(self, state: dict, action, next_state: dict):
        raise NotImplementedError

    def terminated(self, state: dict) -> np.ndarray:
        return np.zeros(np.shape(T.value(next(iter(state.values()))))[0], dtype=bool)

    def observe(self, state: dict) -> Observation:
        raise NotImplementedError


def stack_states(states: list[dict]) -> dict:
    return {k: np.stack([s[k] for s in states]) for k in states[0]}


def _merge(mask, fresh, cur):
    if isinstance(cur, T.TapeVar) or np.issubdtype(np.asarray(cur).dtype, np.floating):
        m = mask.reshape((-1,) + (1,) * (np.ndim(T.value(cur)) - 1))
        return T.where(m, fresh, cur)
    m = mask.reshape((-1,) + (1,) * (np.ndim(cur) - 1))
    return np.where(m, fresh, cur)


class EnvBatch:
    """``num_envs`` copies of a task stepped together.

    Each env owns a generator spawned from the batch seed, so resets of one
    env never perturb another's stream.
    """

    def __init__(self, task: Task, num_envs: int, seed: int = 0):
        if num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        self.task = task
        self.num_envs = num_envs
        self.reset(seed)

    @property
    def act_dim(self):
        return self.task.act_dim

    @property
    def episode_length(self):
        return self.task.episode_length

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.seed = int(seed)
            ss = np.random.SeedSequence(self.seed)
            self.rngs = [np.random.default_rng(s) for s in ss.spawn(self.num_envs)]
        self.state = stack_states([self.task.initial_state(r) for r in self.rngs])
        self.t = np.zeros(self.num_envs, dtype=np.int64)
        self.episode_return = np.zeros(self.num_envs)
        self.completed_returns: list[float] = []
        return self.observe()

    def observe(self) -> Observation:
        return self.task.observe(self.state)

    def step(self, actions) -> StepResult:
        a = T.clamp(actions, -1.0, 1.0)
        nxt = self.task.dynamics(self.state, a)
        r = self.task.reward(self.state, a, nxt)
        rv = T.value(r)
        if not np.all(np.isfinite(rv)):
            bad = int(np.flatnonzero(~np.isfinite(rv))[0])
            raise FloatingPointError(f"non-finite reward in env {bad}")
        self.t = self.t + 1
        term = np.asarray(self.task.terminated(nxt), dtype=bool)
        done = term | (self.t >= self.task.episode_length)
        self.episode_return = self.episode_return + rv
        terminal_obs = self.task.observe(nxt)
        if np.any(done):
            ids = np.flatnonzero(done)
            self.completed_returns.extend(float(self.episode_return[i]) for i in ids)
            fresh = [self.task.initial_state(self.rngs[i]) if done[i] else None
                     for i in range(self.num_envs)]
            fill = next(f for f in fresh if f is not None)
            fresh = stack_states([f if f is not None else fill for f in fresh])
            nxt = {k: _merge(done, fresh[k], v) for k, v in nxt.items()}
            self.t = np.where(done, 0, self.t)
            self.episode_return = np.where(done, 0.0, self.episode_return)
        self.state = nxt
        return StepResult(self.observe(), r, done, terminal_obs, term & done)

    def detach(self):
        """Cut the tape: keep state values, drop their history."""
        self.state = {k: T.value(v) if isinstance(v, T.TapeVar) else v
                      for k, v in self.state.items()}

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "state": {k: np.array(T.value(v) if isinstance(v, T.TapeVar) else v)
                      for k, v in self.state.items()},
            "t": self.t.copy(),
            "episode_return": self.episode_return.copy(),
            "completed_returns": list(self.completed_returns),
            "rng": [r.bit_generator.state for r in self.rngs],
        }

    def load_state_dict(self, d: dict):
        self.seed = d["seed"]
        self.state = {k: np.array(v) for k, v in d["state"].items()}
        self.t = np.array(d["t"], dtype=np.int64)
        self.episode_return = np.array(d["episode_return"], dtype=np.float64)
        self.completed_returns = list(d["completed_returns"])
        self.rngs = []
        for st in d["rng"]:
            r = np.random.default_rng()
            r.bit_generator.state = st
            self.rngs.append(r)


def checkpointed(fn, inputs):
    """Run ``fn(*inputs)`` as a recompute-on-backward tape segment when taped."""
    g = T.graph_of(*inputs)
    if g is None:
        return tuple(fn(*inputs))
    return g.checkpoint(fn, inputs)


def subsample_indices(rng, n, k):
    """Fixed point-cloud indices for one env, drawn at reset."""
    return np.sort(rng.choice(n, size=min(k, n), replace=False))


def cloud(points, idx):
    """Gather (B, K, 3) points with per-env index rows ``idx`` (B, K)."""
    B = idx.shape[0]
    return points[np.arange(B)[:, None], idx]
