"""Flatten an elastoplastic dough block with a kinematic rolling pin."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softgrad import mpm
from softgrad import tape as T
from softgrad.envs.base import Observation, Task, checkpointed, cloud, subsample_indices
from softgrad.envs.rewards import reward_distance_tiered


@dataclass
class RollFlatParams:
    E: float = 5000.0
    nu: float = 0.2
    sigma_y: float = 50.0
    rho: float = 1.0
    yield_mode: str = "half"
    mu_b: float = 0.9
    alpha_c: float = 100.0
    grid_dims: int = 16
    dx: float = 0.025
    substep_dt: float = 1e-4
    substeps: int = 8
    episode_length: int = 32
    gravity: float = 9.81
    h_flat: float = 0.125
    tier_threshold: float = 0.33
    dough_size: tuple = (0.1, 0.1, 0.075)
    ppc: float = 2.0
    pin_radius: float = 0.03
    pin_gap: float = 0.005
    # per-step action scale for (dx, dz, dtheta)
    action_scale: tuple = (0.002, 0.002, 0.05)
    scale_range: tuple = (0.9, 1.1)
    shift_xy: float = 0.02
    shift_z: tuple = (0.0, 0.0)
    cloud_size: int = 64
    layout_seed: int = 0


class MiniRollFlat(Task):
    name = "mini_rollflat"
    act_dim = 3
    obs_dim = 6

    def __init__(self, params: RollFlatParams | None = None):
        self.p = p = params or RollFlatParams()
        self.episode_length = p.episode_length
        self.frame_time = p.substep_dt * p.substeps
        self.grid = mpm.MpmGrid(p.grid_dims, p.dx)
        self.material = mpm.MpmMaterial(rho=p.rho, E=p.E, nu=p.nu, sigma_y=p.sigma_y,
                                        kind="elastoplastic", yield_mode=p.yield_mode)
        self.floor = self.grid.bound * p.dx
        self.centre = 0.5 * p.grid_dims * p.dx
        size = np.asarray(p.dough_size, dtype=np.float64)
        lo = np.array([self.centre - size[0] / 2, self.centre - size[1] / 2, self.floor])
        rng = np.random.default_rng(p.layout_seed)
        self.rest_x, self.rest_vol = mpm.sample_box(lo, lo + size, p.dx, p.ppc, rng)
        self.num_particles = len(self.rest_x)
        self.cloud_size = min(p.cloud_size, self.num_particles)
        span = (p.grid_dims - 4) * p.dx
        self.pin_lo = np.array([self.centre - span / 2, self.floor + 0.5 * p.pin_radius, -np.pi])
        self.pin_hi = np.array([self.centre + span / 2, self.floor + span, np.pi])

    def initial_state(self, rng):
        p = self.p
        s = rng.uniform(*p.scale_range)
        x = self.rest_x.copy()
        base = np.array([x[:, 0].mean(), x[:, 1].mean(), self.floor])
        x = base + s * (x - base)
        shift = np.array([rng.uniform(-p.shift_xy, p.shift_xy), rng.uniform(-p.shift_xy, p.shift_xy),
                          rng.uniform(*p.shift_z)])
        x = x + shift
        top = x[:, 2].max()
        pin = np.array([x[:, 0].mean(), top + p.pin_radius + p.pin_gap, np.pi / 2])
        n = self.num_particles
        vol = np.full(n, self.rest_vol * s ** 3)
        return {
            "x": x, "v": np.zeros_like(x), "F": np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
            "C": np.zeros((n, 3, 3)), "mass": p.rho * vol, "vol": vol, "pin": pin,
            "cloud_idx": subsample_indices(rng, n, self.cloud_size),
        }

    def dynamics(self, state, action):
        p = self.p
        frame = p.substep_dt * p.substeps
        target = T.clamp(state["pin"] + action * np.asarray(p.action_scale), self.pin_lo, self.pin_hi)
        mass, vol = T.value(state["mass"]), T.value(state["vol"])
        y = np.full(np.shape(mass)[0], self.centre)
        gravity = np.array([0.0, 0.0, -p.gravity])

        def frame_fn(x, v, F, C, pin, tgt):
            st = mpm.MpmState(x, v, F, C, mass, vol)
            vel3 = (tgt - pin) / frame
            lin = T.stack([vel3[:, 0], np.zeros_like(y), vel3[:, 1]], axis=-1)
            for k in range(p.substeps):
                frac = k / p.substeps
                cur = pin + (tgt - pin) * frac
                centre = T.stack([cur[:, 0], y, cur[:, 1]], axis=-1)
                pin_col = mpm.CylinderCollider(centre, cur[:, 2], p.pin_radius, lin, vel3[:, 2])
                coupling = mpm.CouplingParams(p.alpha_c, p.mu_b, [pin_col])
                st = mpm.substep(st, self.grid, self.material, coupling, gravity, p.substep_dt)
            return st.x, st.v, st.F, st.C

        x, v, F, C = checkpointed(frame_fn, [state["x"], state["v"], state["F"], state["C"],
                                             state["pin"], target])
        out = dict(state)
        out.update(x=x, v=v, F=F, C=C, pin=target)
        return out

    def reward(self, state, action, next_state):
        z = next_state["x"][..., 2] - self.floor
        zbar = T.mean(z, axis=-1)
        d = zbar / self.p.h_flat
        r_d = reward_distance_tiered(d, self.p.tier_threshold, 1.0, 2.0)
        dz = z - T.expand_dims(zbar, -1)
        r_flat = -T.mean(dz * dz, axis=-1)
        return r_d + r_flat

    def observe(self, state):
        x = state["x"]
        com = T.mean(x, axis=1) - self.centre
        pin = state["pin"] - np.array([self.centre, self.centre, 0.0])
        pts = cloud(x, state["cloud_idx"]) - self.centre
        return Observation(T.concatenate([com, pin], axis=-1), pts)
