"""Carry a container of weakly compressible fluid to a target without spilling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softgrad import mpm
from softgrad import tape as T
from softgrad.envs.base import Observation, Task, checkpointed, cloud, subsample_indices
from softgrad.envs.rewards import reward_distance_tiered, smooth_outside_fraction


@dataclass
class FluidMoveParams:
    E: float = 1e5
    nu: float = 0.3
    rho: float = 1e3
    mu_b: float = 0.5
    alpha_c: float = 100.0
    grid_dims: int = 20
    dx: float = 0.02
    substep_dt: float = 5e-4
    substeps: int = 10
    episode_length: int = 32
    gravity: float = 9.81
    tier_threshold: float = 2e-4
    cavity_half: tuple = (0.04, 0.04)
    wall_height: float = 0.06
    wall_thickness: float = 0.02
    fluid_height: float = 0.035
    ppc: float = 4.0
    action_scale: float = 0.002
    target_xy: float = 0.03
    target_z: tuple = (0.0, 0.03)
    spill_temperature: float = 0.01
    cloud_size: int = 64
    layout_seed: int = 0


class MiniFluidMove(Task):
    name = "mini_fluidmove"
    act_dim = 3
    obs_dim = 9

    def __init__(self, params: FluidMoveParams | None = None):
        self.p = p = params or FluidMoveParams()
        self.episode_length = p.episode_length
        self.frame_time = p.substep_dt * p.substeps
        self.grid = mpm.MpmGrid(p.grid_dims, p.dx)
        self.material = mpm.MpmMaterial(rho=p.rho, E=p.E, nu=p.nu, kind="fluid")
        c = 0.5 * p.grid_dims * p.dx
        floor = self.grid.bound * p.dx + p.wall_thickness
        self.home = np.array([c, c, floor])
        hx, hy = p.cavity_half
        # keep the fluid a cell away from the walls so it starts free of the collider
        gap = 0.5 * p.dx
        lo = self.home + np.array([-hx + gap, -hy + gap, gap])
        hi = self.home + np.array([hx - gap, hy - gap, gap + p.fluid_height])
        rng = np.random.default_rng(p.layout_seed)
        self.rest_x, vol = mpm.sample_box(lo, hi, p.dx, p.ppc, rng)
        self.num_particles = len(self.rest_x)
        self.cloud_size = min(p.cloud_size, self.num_particles)
        self.rest_vol = np.full(self.num_particles, vol)
        room = (p.grid_dims * p.dx) / 2 - hx - p.wall_thickness - 3.5 * p.dx
        self.box_lo = self.home - np.array([room, room, 0.0])
        self.box_hi = self.home + np.array([room, room, 0.5 * room])

    def initial_state(self, rng):
        p = self.p
        tgt = self.home + np.array([rng.uniform(-p.target_xy, p.target_xy),
                                    rng.uniform(-p.target_xy, p.target_xy), rng.uniform(*p.target_z)])
        tgt = np.clip(tgt, self.box_lo, self.box_hi)
        x = self.rest_x.copy()
        n = self.num_particles
        return {
            "x": x, "v": np.zeros_like(x), "F": np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
            "C": np.zeros((n, 3, 3)), "mass": p.rho * self.rest_vol, "vol": self.rest_vol.copy(),
            "box": self.home.copy(), "target": tgt,
            "cloud_idx": subsample_indices(rng, n, self.cloud_size),
        }

    def container(self, centre, velocity):
        p = self.p
        return mpm.OpenBoxCollider(centre, p.cavity_half, p.wall_height, p.wall_thickness, velocity)

    def dynamics(self, state, action):
        p = self.p
        frame = p.substep_dt * p.substeps
        target = T.clamp(state["box"] + p.action_scale * action, self.box_lo, self.box_hi)
        mass, vol = T.value(state["mass"]), T.value(state["vol"])
        gravity = np.array([0.0, 0.0, -p.gravity])

        def frame_fn(x, v, F, C, box, tgt):
            st = mpm.MpmState(x, v, F, C, mass, vol)
            vel = (tgt - box) / frame
            for k in range(p.substeps):
                cur = box + (tgt - box) * (k / p.substeps)
                coupling = mpm.CouplingParams(p.alpha_c, p.mu_b, [self.container(cur, vel)])
                st = mpm.substep(st, self.grid, self.material, coupling, gravity, p.substep_dt)
            return st.x, st.v, st.F, st.C

        x, v, F, C = checkpointed(frame_fn, [state["x"], state["v"], state["F"], state["C"],
                                             state["box"], target])
        out = dict(state)
        out.update(x=x, v=v, F=F, C=C, box=target)
        return out

    def spill_fraction(self, state):
        p = self.p
        hx, hy = p.cavity_half
        box = T.expand_dims(state["box"], 1)
        lo = box - np.array([hx, hy, 0.0])
        hi = box + np.array([hx, hy, p.wall_height])
        return smooth_outside_fraction(state["x"], lo, hi, p.spill_temperature)

    def reward(self, state, action, next_state):
        err = next_state["box"] - next_state["target"]
        # epsilon keeps the distance differentiable when the box sits exactly on target
        d = T.sqrt(T.sum(err * err, axis=-1) + 1e-12)
        return reward_distance_tiered(d, self.p.tier_threshold, 1.0, 2.0) - self.spill_fraction(next_state)

    def observe(self, state):
        com = T.mean(state["x"], axis=1) - self.home
        pts = cloud(state["x"], state["cloud_idx"]) - self.home
        vec = T.concatenate([com, state["box"] - self.home, state["target"] - self.home], axis=-1)
        return Observation(vec, pts)
