"""Batched MLS-MPM with quadratic B-splines and APIC transfers.

Particle arrays carry a leading env axis ``B``; each env owns its own
background grid.  Grid accumulation is a sequential scatter in particle
order, so forward values and gradients are reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from softgrad import tape as T

log = logging.getLogger(__name__)

_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)],
                    dtype=np.float64)


class SimulationError(RuntimeError):
    pass


@dataclass
class MpmMaterial:
    rho: float
    E: float
    nu: float
    sigma_y: float = 0.0
    kind: str = "elastoplastic"  # or "fluid"
    # "half": c_y = sigma_y / (2 mu); "full": c_y = sigma_y / mu
    yield_mode: str = "half"

    def __post_init__(self):
        if not 0.0 < self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")
        if self.E <= 0:
            raise ValueError("Young's modulus must be > 0")
        if self.kind not in ("elastoplastic", "fluid"):
            raise ValueError(f"unknown material kind {self.kind!r}")
        if self.yield_mode not in ("half", "full"):
            raise ValueError("yield_mode must be 'half' or 'full'")

    @property
    def mu(self):
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self):
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @property
    def yield_strain(self):
        denom = 2.0 * self.mu if self.yield_mode == "half" else self.mu
        return self.sigma_y / denom


@dataclass
class MpmState:
    x: object  # (B, P, 3)
    v: object
    F: object  # (B, P, 3, 3)
    C: object
    mass: np.ndarray  # (P,) or (B, P)
    volume: np.ndarray  # rest volume, same shape as mass
    material_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def replace(self, **kw) -> "MpmState":
        return dataclasses.replace(self, **kw)

    @property
    def num_envs(self):
        return np.shape(T.value(self.x))[0]

    @classmethod
    def at_rest(cls, x, density, particle_volume):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, P, _ = x.shape
        eye = np.broadcast_to(np.eye(3), (B, P, 3, 3)).copy()
        vol = np.full(P, float(particle_volume))
        return cls(x, np.zeros_like(x), eye, np.zeros((B, P, 3, 3)), density * vol, vol,
                   np.zeros(P, dtype=np.int64))


@dataclass
class MpmGrid:
    """Background grid.  Only nodes touched by some particle are stored.

    After :func:`p2g`, ``nodes`` holds sorted global ids ``env * dims**3 +
    (i * dims + j) * dims + k`` of the active nodes and ``mass`` (M,) /
    ``momentum`` (M, 3) are aligned with it.
    """

    dims: int
    dx: float
    momentum: object = None
    mass: object = None
    nodes: np.ndarray = None
    bound: int = 3

    def __post_init__(self):
        if self.dims < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        if self.dx <= 0:
            raise ValueError("dx must be > 0")

    @property
    def num_nodes(self):
        return self.dims ** 3

    def node_env(self):
        return self.nodes // self.num_nodes

    def node_index(self):
        """Integer (i, j, k) of each active node."""
        local = self.nodes % self.num_nodes
        G = self.dims
        return np.stack([local // (G * G), (local // G) % G, local % G], -1)

    def node_positions(self):
        return self.node_index() * self.dx

    def dense(self, num_envs):
        """(mass (B, G^3), momentum (B, G^3, 3)) as plain arrays."""
        m = np.zeros(num_envs * self.num_nodes)
        p = np.zeros((num_envs * self.num_nodes, 3))
        m[self.nodes] = T.value(self.mass)
        p[self.nodes] = T.value(self.momentum)
        return m.reshape(num_envs, -1), p.reshape(num_envs, -1, 3)

    def empty(self) -> "MpmGrid":
        return dataclasses.replace(self, momentum=None, mass=None, nodes=None)


@dataclass
class CouplingParams:
    alpha_c: float = 100.0
    mu_b: float = 0.0
    colliders: Sequence = ()

    def __post_init__(self):
        if self.alpha_c <= 0:
            raise ValueError("alpha_c must be > 0")
        if self.mu_b < 0:
            raise ValueError("mu_b must be >= 0")


# ---------------------------------------------------------------------------
# colliders: query(pos (M, 3), env (M,)) -> (signed distance, unit normal,
# surface velocity).  Per-env parameters have a leading env axis and are
# gathered per node.

def _safe_norm(v, axis=-1, keepdims=False, eps=1e-20):
    return T.sqrt(T.sum(v * v, axis=axis, keepdims=keepdims) + eps)


def _per_node(param, env):
    return None if param is None else T.gather(param, env)


@dataclass
class PlaneCollider:
    """Static half-space ``n . x >= offset``."""

    normal: np.ndarray
    offset: float

    def query(self, pos, env):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        d = pos @ n - self.offset
        return d, np.broadcast_to(n, pos.shape), np.zeros(pos.shape)


@dataclass
class CylinderCollider:
    """Horizontal cylinder whose axis lies in the xy-plane at yaw ``angle``.

    ``center``/``velocity`` are (B, 3), ``angle``/``omega`` (B,); any may be
    tape variables.  ``omega`` spins the surface about the vertical through
    ``center``.
    """

    center: object
    angle: object
    radius: float
    velocity: object = None
    omega: object = None

    def query(self, pos, env):
        c = _per_node(self.center, env)
        ang = _per_node(self.angle, env)
        zero = np.zeros(len(env))
        ax = T.stack([T.cos(ang), T.sin(ang), zero], axis=-1)
        rel = pos - c
        along = T.sum(rel * ax, axis=-1, keepdims=True)
        radial = rel - along * ax
        r = _safe_norm(radial, keepdims=True)
        d = r[:, 0] - self.radius
        n = radial / r
        vel = np.zeros(pos.shape)
        if self.velocity is not None:
            vel = vel + _per_node(self.velocity, env)
        if self.omega is not None:
            w = _per_node(self.omega, env)
            vel = vel + T.stack([-w * rel[:, 1], w * rel[:, 0], zero], axis=-1)
        return d, n, vel


@dataclass
class OpenBoxCollider:
    """Container: floor plus four walls of a box open at the top.

    ``center`` (B, 3) is the centre of the cavity floor; ``half`` the cavity
    half-extents in x, y; walls have height ``height`` and thickness ``wall``.
    """

    center: object
    half: tuple
    height: float
    wall: float
    velocity: object = None

    def _slabs(self):
        hx, hy = self.half
        w, h = self.wall, self.height
        # (offset from centre, half extents)
        return [
            ((0.0, 0.0, -w / 2), (hx + w, hy + w, w / 2)),
            ((-(hx + w / 2), 0.0, h / 2), (w / 2, hy + w, h / 2)),
            ((hx + w / 2, 0.0, h / 2), (w / 2, hy + w, h / 2)),
            ((0.0, -(hy + w / 2), h / 2), (hx, w / 2, h / 2)),
            ((0.0, hy + w / 2, h / 2), (hx, w / 2, h / 2)),
        ]

    def query(self, pos, env):
        rel = pos - _per_node(self.center, env)
        best = None
        for off, ext in self._slabs():
            d, n = _box_sdf(rel - np.asarray(off), np.asarray(ext))
            if best is None:
                best = (d, n)
            else:
                closer = T.value(d) < T.value(best[0])
                best = (T.where(closer, d, best[0]), T.where(closer[:, None], n, best[1]))
        vel = np.zeros(pos.shape)
        if self.velocity is not None:
            vel = vel + _per_node(self.velocity, env)
        return best[0], best[1], vel


def _box_sdf(rel, ext):
    sgn = np.where(T.value(rel) >= 0, 1.0, -1.0)
    q = T.abs(rel) - ext
    qv = T.value(q)
    is_out = np.any(qv > 0, axis=-1)
    outside = T.maximum(q, 0.0)
    out_len = _safe_norm(outside)
    face = np.eye(3)[np.argmax(qv, axis=-1)]
    inside_d = T.sum(q * face, axis=-1)
    d = T.where(is_out, out_len, inside_d)
    n_out = outside / T.expand_dims(out_len, -1) * sgn
    n = T.where(is_out[..., None], n_out, face * sgn)
    return d, n


# ---------------------------------------------------------------------------
# constitutive models

def _check_det(F):
    J = np.linalg.det(T.value(F))
    if np.any(J <= 0):
        bad = np.argwhere(J <= 0)[0]
        raise SimulationError(f"det(F) <= 0 at index {tuple(int(i) for i in bad)}")


def _diag(s):
    return T.expand_dims(s, -2) * np.eye(3)


def stress_elastoplastic(F, material: MpmMaterial):
    """Hencky elasticity with von Mises return mapping.

    Returns (first Piola stress of F, plastically projected F).
    """
    _check_det(F)
    U, S, V = T.svd3x3(F)
    eps = T.log(S)
    tr = T.sum(eps, axis=-1, keepdims=True)
    tau_diag = 2.0 * material.mu * eps + material.lam * tr
    P = T.matmul(U * T.expand_dims(tau_diag / S, -2), T.swapaxes(V, -1, -2))
    return P, _project_elastoplastic(U, eps, V, F, material)


def kirchhoff_elastoplastic(F, material):
    _check_det(F)
    U, S, V = T.svd3x3(F)
    eps = T.log(S)
    tr = T.sum(eps, axis=-1, keepdims=True)
    tau_diag = 2.0 * material.mu * eps + material.lam * tr
    return T.matmul(U * T.expand_dims(tau_diag, -2), T.swapaxes(U, -1, -2))


def _project_elastoplastic(U, eps, V, F, material):
    tr = T.sum(eps, axis=-1, keepdims=True)
    dev = eps - tr / 3.0
    norm = _safe_norm(dev, keepdims=True)
    dgamma = norm - material.yield_strain
    plastic = T.value(dgamma)[..., 0] > 0
    if not np.any(plastic):
        return F
    eps_new = eps - dgamma * dev / norm
    Fp = T.matmul(U * T.expand_dims(T.exp(eps_new), -2), T.swapaxes(V, -1, -2))
    return T.where(plastic[..., None, None], Fp, F)


def project_elastoplastic(F, material):
    _check_det(F)
    U, S, V = T.svd3x3(F)
    return _project_elastoplastic(U, T.log(S), V, F, material)


def stress_fluid(F, material: MpmMaterial):
    """Weakly compressible fluid: pressure-only stress, isotropic projection."""
    _check_det(F)
    J = T.det3(F)
    k = material.lam * (J - 1.0)
    P = T.cofactor3(F) * T.expand_dims(T.expand_dims(k, -1), -1)
    return P, project_fluid(F)


def kirchhoff_fluid(F, material):
    J = T.det3(F)
    return T.expand_dims(T.expand_dims(material.lam * J * (J - 1.0), -1), -1) * np.eye(3)


def project_fluid(F):
    J = T.det3(F)
    if np.any(T.value(J) <= 0):
        raise SimulationError("det(F) <= 0 in fluid projection")
    return T.expand_dims(T.expand_dims(T.power(J, 1.0 / 3.0), -1), -1) * np.eye(3)


def kirchhoff(F, material):
    if material.kind == "fluid":
        return kirchhoff_fluid(F, material)
    return kirchhoff_elastoplastic(F, material)


def project(F, material):
    if material.kind == "fluid":
        return project_fluid(F)
    return project_elastoplastic(F, material)


# ---------------------------------------------------------------------------
# transfers

def _check_interior(xv, grid, what):
    Xp = xv / grid.dx
    bad = (Xp < 2.0) | (Xp > grid.dims - 2.0)
    if np.any(bad):
        b, p, _ = np.argwhere(bad)[0]
        raise SimulationError(f"{what}: particle {p} of env {b} outside the grid interior at {xv[b, p]}")


def _stencil(x, grid: MpmGrid):
    """B-spline weights (B,P,27), offsets dpos (B,P,27,3), global node ids (B,P,27)."""
    xv = T.value(x)
    base = np.floor(xv / grid.dx - 0.5)
    fx = x / grid.dx - base
    w0 = 0.5 * (1.5 - fx) ** 2
    w1 = 0.75 - (fx - 1.0) ** 2
    w2 = 0.5 * (fx - 0.5) ** 2
    W = T.stack([w0, w1, w2], axis=-2)  # (B,P,3 offsets,3 axes)
    wx, wy, wz = W[..., 0], W[..., 1], W[..., 2]
    w = T.reshape(T.expand_dims(T.expand_dims(wx, -1), -1) * T.expand_dims(T.expand_dims(wy, -1), -3)
                  * T.expand_dims(T.expand_dims(wz, -2), -2), np.shape(xv)[:2] + (27,))
    dpos = (_OFFSETS - T.expand_dims(fx, -2)) * grid.dx
    B = xv.shape[0]
    node = base[:, :, None, :].astype(np.int64) + _OFFSETS.astype(np.int64)
    G = grid.dims
    flat = ((node[..., 0] * G + node[..., 1]) * G + node[..., 2]) + (np.arange(B) * G ** 3)[:, None, None]
    return w, dpos, flat


def p2g(state: MpmState, grid: MpmGrid, material: MpmMaterial, dt: float) -> MpmGrid:
    """Scatter particle mass and APIC momentum, including the MLS stress term."""
    _check_interior(T.value(state.x), grid, "p2g")
    w, dpos, flat = _stencil(state.x, grid)
    nodes, inv = np.unique(flat, return_inverse=True)
    tau = kirchhoff(state.F, material)
    scale = -dt * 4.0 / grid.dx ** 2 * np.asarray(state.volume)[..., None, None]
    affine = tau * scale + state.C * np.asarray(state.mass)[..., None, None]
    mv = state.v * np.asarray(state.mass)[..., None]
    contrib = T.expand_dims(mv, -2) + T.matmul(dpos, T.swapaxes(affine, -1, -2))
    mom = contrib * T.expand_dims(w, -1)
    m = w * np.asarray(state.mass)[..., None]
    rows = T.concatenate([T.expand_dims(m, -1), mom], axis=-1)  # (B,P,27,4)
    acc = T.scatter_add(rows, inv.reshape(flat.shape), len(nodes))
    return dataclasses.replace(grid, mass=acc[:, 0], momentum=acc[:, 1:], nodes=nodes)


def grid_update(grid: MpmGrid, gravity, coupling: CouplingParams | None, dt: float):
    """Grid velocities after gravity, smoothed collider projection and walls.

    Returns the grid with ``momentum`` replaced by node velocities.
    """
    mass = grid.mass
    has = T.value(mass) > 0
    denom = T.where(has, mass, 1.0)
    v = grid.momentum / T.expand_dims(denom, -1)
    v = T.where(has[:, None], v + dt * np.asarray(gravity, dtype=np.float64), 0.0)
    if coupling is not None and coupling.colliders:
        v = collide(v, grid.node_positions(), grid.node_env(), coupling)
    idx = grid.node_index()
    vv = T.value(v)
    stop = ((idx < grid.bound) & (vv < 0)) | ((idx > grid.dims - 1 - grid.bound) & (vv > 0))
    v = T.where(stop, 0.0, v)
    return dataclasses.replace(grid, momentum=v)


def collision_strength(d, alpha_c):
    return T.minimum(T.exp(-alpha_c * d), 1.0)


def collide(v, pos, env, coupling: CouplingParams):
    """Blend free and collider-projected node velocities by the collision strength."""
    best = None
    for col in coupling.colliders:
        d, n, vc = col.query(pos, env)
        if best is None:
            best = (d, n, vc)
        else:
            closer = T.value(d) < T.value(best[0])
            best = (T.where(closer, d, best[0]), T.where(closer[:, None], n, best[1]),
                    T.where(closer[:, None], vc, best[2]))
    d, n, vc = best
    s = collision_strength(d, coupling.alpha_c)
    vrel = v - vc
    vn = T.sum(vrel * n, axis=-1, keepdims=True)
    approaching = T.value(vn) < 0
    vt = vrel - vn * n
    if coupling.mu_b > 0:
        vt_norm = _safe_norm(vt, keepdims=True)
        vt = vt * (T.maximum(vt_norm + coupling.mu_b * vn, 0.0) / vt_norm)
    vproj = T.where(approaching, vt, vrel) + vc
    s = T.expand_dims(s, -1)
    return v * (1.0 - s) + vproj * s


def g2p(state: MpmState, grid: MpmGrid, dt: float, material: MpmMaterial | None = None) -> MpmState:
    """Gather APIC velocity and affine field, advect, update and project F."""
    w, dpos, flat = _stencil(state.x, grid)
    idx = np.searchsorted(grid.nodes, flat)
    if np.any(idx >= len(grid.nodes)) or np.any(grid.nodes[np.minimum(idx, len(grid.nodes) - 1)] != flat):
        raise SimulationError("g2p stencil touches nodes missing from the grid; run p2g on this state")
    vg = T.gather(grid.momentum, idx)  # (B,P,27,3)
    wv = vg * T.expand_dims(w, -1)
    v_new = T.sum(wv, axis=-2)
    C_new = T.matmul(T.swapaxes(wv, -1, -2), dpos) * (4.0 / grid.dx ** 2)
    x_new = state.x + dt * v_new
    F_new = T.matmul(np.eye(3) + dt * C_new, state.F)
    if material is not None:
        F_new = project(F_new, material)
    _check_interior(T.value(x_new), grid, "g2p advection")
    return state.replace(x=x_new, v=v_new, F=F_new, C=C_new)


def substep(state, grid, material, coupling, gravity, dt):
    g = p2g(state, grid, material, dt)
    g = grid_update(g, gravity, coupling, dt)
    return g2p(state, g, dt, material)


def mpm_step(state: MpmState, grid: MpmGrid, material: MpmMaterial, coupling, gravity,
             dt: float, substeps: int = 1) -> MpmState:
    """``substeps`` composed MLS-MPM substeps of size ``dt``."""
    vmax = float(np.max(np.abs(T.value(state.v)))) if np.size(T.value(state.v)) else 0.0
    if vmax * dt >= grid.dx:
        log.warning("CFL violated: max|v| dt = %.3g >= dx = %.3g", vmax * dt, grid.dx)
    for _ in range(substeps):
        state = substep(state, grid, material, coupling, gravity, dt)
    return state


# ---------------------------------------------------------------------------
# particle samplers

def sample_box(lo, hi, dx, ppc, rng):
    """Jittered particles filling an axis-aligned box, ``ppc`` per grid cell."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = max(1, int(round(np.prod((hi - lo) / dx) * ppc)))
    return lo + (hi - lo) * rng.random((n, 3)), float(np.prod(hi - lo) / n)


def sample_cylinder(center, radius, height, dx, ppc, rng):
    vol = np.pi * radius ** 2 * height
    n = max(1, int(round(vol / dx ** 3 * ppc)))
    r = radius * np.sqrt(rng.random(n))
    th = 2 * np.pi * rng.random(n)
    z = height * rng.random(n)
    pts = np.stack([r * np.cos(th), r * np.sin(th), z], -1) + np.asarray(center, float)
    return pts, vol / n
