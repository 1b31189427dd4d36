"""2-D double integrator driven toward a fixed goal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softgrad import tape as T
from softgrad.envs.base import Observation, Task


@dataclass
class PointMassParams:
    dt: float = 0.1
    force_scale: float = 1.0
    ctrl_cost: float = 0.01
    episode_length: int = 32
    goal: tuple = (0.0, 0.0)
    init_pos: tuple = (0.5, -0.5)
    init_pos_width: float = 0.5  # uniform half-width around init_pos
    init_vel_width: float = 0.0


class PointMassReach(Task):
    name = "point_mass_reach"
    act_dim = 2
    obs_dim = 4

    def __init__(self, params: PointMassParams | None = None):
        self.p = params or PointMassParams()
        self.episode_length = self.p.episode_length
        self.frame_time = self.p.dt
        self.goal = np.asarray(self.p.goal, dtype=np.float64)

    def initial_state(self, rng):
        w, wv = self.p.init_pos_width, self.p.init_vel_width
        pos = np.asarray(self.p.init_pos, dtype=np.float64) + rng.uniform(-w, w, 2)
        vel = rng.uniform(-wv, wv, 2)
        return {"pos": pos, "vel": vel}

    def dynamics(self, state, action):
        vel = state["vel"] + self.p.dt * self.p.force_scale * action
        return {"pos": state["pos"] + self.p.dt * vel, "vel": vel}

    def reward(self, state, action, next_state):
        err = next_state["pos"] - self.goal
        return -T.sum(err * err, axis=-1) - self.p.ctrl_cost * T.sum(action * action, axis=-1)

    def observe(self, state):
        return Observation(T.concatenate([state["pos"] - self.goal, state["vel"]], axis=-1))
