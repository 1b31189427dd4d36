"""Tetrahedral FEM with the stable neo-Hookean energy and per-tet actuation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from softgrad import tape as T
from softgrad.rigid import ContactParams, ground_contact


class SimulationError(RuntimeError):
    pass


@dataclass
class FemMaterial:
    lam: float
    mu: float
    alpha_nh: float | None = None  # default: 1 + 3 mu / (4 lam), stress free at F = I
    k_damp: float = 0.0
    actuation_scale: float = 0.0
    density: float = 1.0

    def __post_init__(self):
        if self.lam <= 0 or self.mu <= 0:
            raise ValueError("Lame parameters must be > 0")
        if self.k_damp < 0:
            raise ValueError("k_damp must be >= 0")
        if self.alpha_nh is None:
            self.alpha_nh = 1.0 + 3.0 * self.mu / (4.0 * self.lam)


@dataclass
class FemMesh:
    """Tet mesh plus particle state; ``x``/``v`` may carry a leading env axis."""

    x: object
    v: object
    tets: np.ndarray
    Dm_inv: np.ndarray
    rest_volume: np.ndarray
    particle_mass: np.ndarray

    @classmethod
    def from_rest(cls, vertices, tets, density: float = 1.0) -> "FemMesh":
        X = np.asarray(vertices, dtype=np.float64)
        tets = np.asarray(tets, dtype=np.int64).copy()
        Dm = _shape_matrix(X[tets])
        vol = np.linalg.det(Dm) / 6.0
        flip = vol < 0
        tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
        Dm = _shape_matrix(X[tets])
        vol = np.linalg.det(Dm) / 6.0
        if np.any(vol <= 1e-14):
            raise ValueError(f"degenerate tetrahedra: {np.flatnonzero(vol <= 1e-14)[:5]}")
        mass = np.zeros(len(X))
        np.add.at(mass, tets.reshape(-1), np.repeat(density * vol / 4.0, 4))
        if np.any(mass <= 0):
            raise ValueError("mesh has vertices not referenced by any tet")
        return cls(X.copy(), np.zeros_like(X), tets, np.linalg.inv(Dm), vol, mass)

    @property
    def num_particles(self):
        return np.shape(self.particle_mass)[-1]

    def scaled(self, s) -> "FemMesh":
        """Per-env uniformly rescaled rest shape; ``s`` has shape (B,)."""
        s = np.asarray(s, dtype=np.float64)
        Dm_inv = self.Dm_inv / s[:, None, None, None]
        vol = self.rest_volume * s[:, None] ** 3
        mass = self.particle_mass * s[:, None] ** 3
        return dataclasses.replace(self, Dm_inv=Dm_inv, rest_volume=vol, particle_mass=mass)

    def with_state(self, x, v) -> "FemMesh":
        return dataclasses.replace(self, x=x, v=v)


def _shape_matrix(xs):
    """Edge matrix with columns x1-x0, x2-x0, x3-x0 from (..., 4, 3) corners."""
    return np.swapaxes(xs[..., 1:, :] - xs[..., :1, :], -1, -2)


def _corners(mesh, arr):
    arr = arr if np.ndim(T.value(arr)) == 3 else T.reshape(arr, (1,) + np.shape(T.value(arr)))
    return arr[:, mesh.tets]  # (B, Ntet, 4, 3)


def deformation_gradient(mesh: FemMesh, tet_index=None):
    """F = Ds Dm^-1 for all tets (B, Ntet, 3, 3), or one tet if indexed."""
    c = _corners(mesh, mesh.x)
    Ds = T.swapaxes(c[:, :, 1:, :] - c[:, :, :1, :], -1, -2)
    F = T.matmul(Ds, mesh.Dm_inv)
    if tet_index is not None:
        return F[:, tet_index] if np.ndim(T.value(mesh.x)) == 3 else F[0, tet_index]
    return F


def _alpha(material, activation):
    if activation is None:
        return material.alpha_nh
    return material.alpha_nh + material.actuation_scale * T.clamp(activation, -1.0, 1.0)


def neo_hookean_energy(F, material: FemMaterial, activation=None):
    """Energy density per tet; actuation shifts the volumetric rest constant."""
    alpha = _alpha(material, activation)
    Ic = T.sum(F * F, axis=(-2, -1))
    J = T.det3(F)
    mu, lam = material.mu, material.lam
    return 0.5 * mu * (Ic - 3.0) + 0.5 * lam * (J - alpha) ** 2 - 0.5 * mu * T.log(Ic + 1.0)


def first_piola(F, material: FemMaterial, activation=None):
    """Analytic dPsi/dF."""
    alpha = _alpha(material, activation)
    Ic = T.sum(F * F, axis=(-2, -1))
    J = T.det3(F)
    mu, lam = material.mu, material.lam
    s = mu * (1.0 - 1.0 / (Ic + 1.0))
    k = lam * (J - alpha)
    return F * s[..., None, None] + T.cofactor3(F) * T.reshape(k, np.shape(T.value(k)) + (1, 1))


def elastic_energy(mesh: FemMesh, material: FemMaterial, activations=None):
    """Total elastic energy per env."""
    psi = neo_hookean_energy(deformation_gradient(mesh), material, activations)
    return T.sum(psi * mesh.rest_volume, axis=-1)


def elastic_forces(mesh: FemMesh, material: FemMaterial, activations=None):
    """Per-particle internal forces (B, Np, 3): elastic plus strain-rate damping."""
    F = deformation_gradient(mesh)
    P = first_piola(F, material, activations)
    if material.k_damp > 0:
        cv = _corners(mesh, mesh.v)
        Fdot = T.matmul(T.swapaxes(cv[:, :, 1:, :] - cv[:, :, :1, :], -1, -2), mesh.Dm_inv)
        P = P + material.k_damp * Fdot
    H = -T.matmul(P, np.swapaxes(mesh.Dm_inv, -1, -2)) * np.asarray(mesh.rest_volume)[..., None, None]
    f123 = T.swapaxes(H, -1, -2)  # rows are forces on corners 1..3
    f0 = -T.sum(f123, axis=-2, keepdims=True)
    per_corner = T.concatenate([f0, f123], axis=-2)  # (B, Ntet, 4, 3)
    flat = T.transpose(per_corner, (1, 2, 0, 3))  # (Ntet, 4, B, 3)
    summed = T.scatter_add(flat, mesh.tets, mesh.num_particles)  # (Np, B, 3)
    return T.transpose(summed, (1, 0, 2))


def fem_step(mesh: FemMesh, material: FemMaterial, activations, gravity, dt: float,
             contact: ContactParams | None = None) -> FemMesh:
    """Semi-implicit Euler update of particle velocities and positions."""
    x, v = mesh.x, mesh.v
    if np.ndim(T.value(x)) == 2:
        x, v = T.reshape(x, (1,) + x.shape), T.reshape(v, (1,) + v.shape)
    m = mesh.with_state(x, v)
    f = elastic_forces(m, material, activations)
    if contact is not None:
        f = f + ground_contact(x, v, contact)
    acc = f / np.asarray(mesh.particle_mass)[..., None] + np.asarray(gravity, dtype=np.float64)
    v2 = v + dt * acc
    x2 = x + dt * v2
    xv = T.value(x2)
    if not np.all(np.isfinite(xv)) or not np.all(np.isfinite(T.value(v2))):
        bad = np.argwhere(~np.isfinite(xv).all(-1) | ~np.isfinite(T.value(v2)).all(-1))[0]
        raise SimulationError(f"non-finite state at env {bad[0]}, particle {bad[1]}")
    return mesh.with_state(x2, v2)


# ---------------------------------------------------------------------------
# mesh construction and IO

_CUBE_TETS = np.array([[0, 1, 3, 7], [0, 1, 7, 5], [0, 5, 7, 4],
                       [0, 3, 2, 7], [0, 2, 6, 7], [0, 6, 4, 7]])


def voxel_mesh(cells, dx: float, origin=(0.0, 0.0, 0.0)):
    """Tet mesh (6 tets per cube) of a set of integer voxel coordinates."""
    verts: dict[tuple, int] = {}
    tets = []
    for c in sorted(map(tuple, cells)):
        ids = []
        for k in range(8):
            key = (c[0] + (k & 1), c[1] + ((k >> 1) & 1), c[2] + ((k >> 2) & 1))
            ids.append(verts.setdefault(key, len(verts)))
        tets.extend([[ids[i] for i in t] for t in _CUBE_TETS])
    X = np.zeros((len(verts), 3))
    for key, i in verts.items():
        X[i] = np.asarray(key, dtype=np.float64) * dx + np.asarray(origin, dtype=np.float64)
    return X, np.array(tets, dtype=np.int64)


def box_mesh(nx, ny, nz, dx, origin=(0.0, 0.0, 0.0)):
    cells = [(i, j, k) for i in range(nx) for j in range(ny) for k in range(nz)]
    return voxel_mesh(cells, dx, origin)


def quadruped_mesh(dx, origin=(0.0, 0.0, 0.0), body=(4, 2), leg_height=1):
    """Slab body standing on four single-voxel legs at its corners."""
    bx, by = body
    cells = [(i, j, leg_height) for i in range(bx) for j in range(by)]
    for i in (0, bx - 1):
        for j in (0, by - 1):
            cells += [(i, j, k) for k in range(leg_height)]
    return voxel_mesh(cells, dx, origin)


def save_mesh(path, vertices, tets):
    """Plain text: one ``x y z`` line per vertex, then one ``i j k l`` line per tet."""
    with open(path, "w") as fh:
        fh.write(f"# {len(vertices)} vertices, {len(tets)} tets\n")
        for p in vertices:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for t in tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")


def load_mesh(path):
    verts, tets = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 3:
            verts.append([float(p) for p in parts])
        elif len(parts) == 4 and all(p.lstrip("-").isdigit() for p in parts):
            tets.append([int(p) for p in parts])
        else:
            raise ValueError(f"{path}:{lineno}: expected 'x y z' or 'i j k l'")
    tets = np.array(tets, dtype=np.int64).reshape(-1, 4)
    if len(tets) and (tets.min() < 0 or tets.max() >= len(verts)):
        raise ValueError(f"{path}: tet index out of range")
    return np.array(verts).reshape(-1, 3), tets
