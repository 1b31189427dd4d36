"""Actuated soft quadruped that should hop forward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softgrad import fem
from softgrad import tape as T
from softgrad.envs.base import Observation, Task, checkpointed, cloud, subsample_indices
from softgrad.rigid import ContactParams


@dataclass
class JumperParams:
    lam: float = 1000.0
    mu: float = 1000.0
    k_damp: float = 1.0
    rho: float = 1.0
    actuation_scale: float = 0.2
    dx: float = 0.05
    body: tuple = (4, 2)
    leg_height: int = 1
    frame_dt: float = 1.0 / 60.0
    substeps: int = 80
    episode_length: int = 64
    gravity: float = 9.81
    contact_k_n: float = 10.0
    contact_k_d: float = 0.01
    contact_mu: float = 0.9
    contact_v_s: float = 0.01
    contact_smoothing: float = 1e-4
    up_weight: float = 3.0
    action_cost: float = 1e-4
    action_downsample: int = 2
    scale_range: tuple = (0.9, 1.1)
    shift_xy: float = 0.1
    shift_z: tuple = (0.0, 0.05)
    cloud_size: int = 32


class MiniJumper(Task):
    name = "mini_jumper"

    def __init__(self, params: JumperParams | None = None):
        self.p = p = params or JumperParams()
        self.episode_length = p.episode_length
        self.frame_time = p.frame_dt
        X, tets = fem.quadruped_mesh(p.dx, body=p.body, leg_height=p.leg_height)
        self.mesh = fem.FemMesh.from_rest(X, tets, p.rho)
        self.material = fem.FemMaterial(p.lam, p.mu, k_damp=p.k_damp,
                                        actuation_scale=p.actuation_scale, density=p.rho)
        self.contact = ContactParams(k_n=p.contact_k_n, k_d=p.contact_k_d, mu_f=p.contact_mu,
                                     v_s=p.contact_v_s, smoothing=p.contact_smoothing)
        n_tet = len(tets)
        self.act_dim = -(-n_tet // p.action_downsample)
        self.upsample = np.minimum(np.arange(n_tet) // p.action_downsample, self.act_dim - 1)
        self.obs_dim = 6 + self.act_dim
        self.cloud_size = min(p.cloud_size, self.mesh.num_particles)
        self.h0 = float(np.average(X[:, 2], weights=self.mesh.particle_mass))

    def initial_state(self, rng):
        p = self.p
        s = rng.uniform(*p.scale_range)
        X = self.mesh.x
        base = np.array([X[:, 0].mean(), X[:, 1].mean(), 0.0])
        shift = np.array([rng.uniform(-p.shift_xy, p.shift_xy), rng.uniform(-p.shift_xy, p.shift_xy),
                          rng.uniform(*p.shift_z)])
        x = base + s * (X - base) + shift
        return {"x": x, "v": np.zeros_like(x), "scale": np.array(s),
                "a_prev": np.zeros(self.act_dim),
                "cloud_idx": subsample_indices(rng, self.mesh.num_particles, self.cloud_size)}

    def dynamics(self, state, action):
        p = self.p
        mesh = self.mesh.scaled(np.atleast_1d(T.value(state["scale"])))
        h = p.frame_dt / p.substeps
        gravity = np.array([0.0, 0.0, -p.gravity])

        def frame_fn(x, v, a):
            act = a[:, self.upsample]
            m = mesh.with_state(x, v)
            for _ in range(p.substeps):
                m = fem.fem_step(m, self.material, act, gravity, h, self.contact)
            return m.x, m.v

        x, v = checkpointed(frame_fn, [state["x"], state["v"], action])
        out = dict(state)
        out.update(x=x, v=v, a_prev=action)
        return out

    def _com(self, state, key):
        mass = self.mesh.particle_mass * np.atleast_1d(T.value(state["scale"]))[:, None] ** 3
        w = mass / mass.sum(-1, keepdims=True)
        return T.sum(state[key] * w[..., None], axis=1)

    def reward(self, state, action, next_state):
        vx = self._com(next_state, "v")[:, 0]
        up = self._com(next_state, "x")[:, 2] - self.h0
        return vx + self.p.up_weight * up - self.p.action_cost * T.sum(action * action, axis=-1)

    def observe(self, state):
        com = self._com(state, "x")
        vel = self._com(state, "v")
        pts = cloud(state["x"], state["cloud_idx"]) - T.expand_dims(com, 1)
        return Observation(T.concatenate([com, vel, state["a_prev"]], axis=-1), pts)
