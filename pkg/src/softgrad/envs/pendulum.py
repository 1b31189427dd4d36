"""Torque-limited pendulum swing-up on the articulated-body solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softgrad import rigid
from softgrad import tape as T
from softgrad.envs.base import Observation, Task


@dataclass
class PendulumParams:
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    max_torque: float = 5.0
    dt: float = 0.05
    substeps: int = 1
    episode_length: int = 100
    init_q: float = float(np.pi)  # hanging down; q = 0 is upright
    init_q_width: float = float(np.pi)
    init_qd_width: float = 1.0


def wrap_angle(q):
    """Map to [-pi, pi); the wrap count is piecewise constant so the slope is 1."""
    k = np.floor((T.value(q) + np.pi) / (2 * np.pi))
    return q - 2 * np.pi * k


class MiniPendulum(Task):
    name = "mini_pendulum"
    act_dim = 1
    obs_dim = 3

    def __init__(self, params: PendulumParams | None = None):
        self.p = p = params or PendulumParams()
        self.episode_length = p.episode_length
        self.frame_time = p.dt
        link = rigid.Link(parent=-1, joint="revolute", mass=p.mass, inertia=np.zeros((3, 3)),
                          com=np.array([0.0, 0.0, p.length]), axis=np.array([0.0, 1.0, 0.0]),
                          torque_limit=p.max_torque)
        self.model = rigid.ArticulationModel([link])
        self.gravity = (0.0, 0.0, -p.gravity)

    def initial_state(self, rng):
        q = self.p.init_q + rng.uniform(-self.p.init_q_width, self.p.init_q_width)
        qd = rng.uniform(-self.p.init_qd_width, self.p.init_qd_width)
        return {"q": np.array([q]), "qd": np.array([qd])}

    def torque(self, action):
        return self.p.max_torque * action

    def dynamics(self, state, action):
        s = rigid.RigidState(state["q"], state["qd"])
        h = self.p.dt / self.p.substeps
        tau = self.torque(action)
        for _ in range(self.p.substeps):
            s = rigid.rigid_step(self.model, s, tau, h, gravity=self.gravity)
        return {"q": s.q, "qd": s.qd}

    def reward(self, state, action, next_state):
        q = wrap_angle(next_state["q"][:, 0])
        qd = next_state["qd"][:, 0]
        tau = self.torque(action)[:, 0]
        return -(q * q) - 0.1 * qd * qd - 0.001 * tau * tau

    def observe(self, state):
        q, qd = state["q"], state["qd"]
        return Observation(T.concatenate([T.cos(q), T.sin(q), qd], axis=-1))
