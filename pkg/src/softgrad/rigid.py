"""Reduced-coordinate articulated rigid bodies.

Joint-space mass matrix by the composite rigid body algorithm, bias forces
by recursive Newton-Euler, a smoothed penalty ground contact, and
semi-implicit Euler stepping.  Spatial vectors are ordered (angular; linear)
and every function is batched over a leading environment axis ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from softgrad import tape as T

_EPS3 = np.zeros((3, 3, 3))
_EPS3[0, 1, 2] = _EPS3[1, 2, 0] = _EPS3[2, 0, 1] = 1.0
_EPS3[0, 2, 1] = _EPS3[2, 1, 0] = _EPS3[1, 0, 2] = -1.0


class ModelError(ValueError):
    pass


class SingularMassMatrix(RuntimeError):
    pass


@dataclass
class ContactParams:
    k_n: float = 1e4
    k_d: float = 10.0
    mu_f: float = 0.9
    v_s: float = 0.1
    # width of the softplus used for penetration depth (m); 0 gives a hard max
    smoothing: float = 1e-4

    def __post_init__(self):
        if self.k_n < 0 or self.k_d < 0:
            raise ValueError("contact stiffness and damping must be >= 0")
        if not 0.0 <= self.mu_f <= 2.0:
            raise ValueError("mu_f must lie in [0, 2]")
        if self.v_s <= 0:
            raise ValueError("v_s must be > 0")


@dataclass
class Link:
    parent: int
    joint: str  # "revolute" | "free"
    mass: float
    inertia: np.ndarray  # 3x3 about the CoM, link frame
    com: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))  # joint origin in parent frame
    torque_limit: float = 0.0  # 0 makes the joint passive
    contact_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


class ArticulationModel:
    """Kinematic tree expanded to one single-DoF body per coordinate.

    A free root becomes three prismatic and three revolute (z, y, x)
    coordinates; only the last of the six carries the link's inertia.
    """

    def __init__(self, links: list[Link]):
        if not links:
            raise ModelError("model needs at least one link")
        for i, ln in enumerate(links):
            if i == 0 and ln.parent != -1:
                raise ModelError("link 0 must be the root (parent -1)")
            if i > 0 and not 0 <= ln.parent < i:
                raise ModelError(f"link {i}: parent {ln.parent} does not form a tree rooted at 0")
            if ln.joint not in ("revolute", "free"):
                raise ModelError(f"link {i}: unsupported joint {ln.joint!r}")
            if ln.joint == "free" and i != 0:
                raise ModelError("only the root may have a free joint")
            if ln.mass <= 0:
                raise ModelError(f"link {i}: mass must be > 0")
            I = np.asarray(ln.inertia, dtype=np.float64)
            if I.shape != (3, 3) or not np.allclose(I, I.T):
                raise ModelError(f"link {i}: inertia must be a symmetric 3x3 matrix")
            if np.linalg.eigvalsh(I).min() < -1e-12:
                raise ModelError(f"link {i}: inertia must be positive semidefinite")
        self.links = links
        self._expand()

    def _expand(self):
        parent, kind, axis, offset, inertia, limit = [], [], [], [], [], []
        self.body_dof = []
        for ln in self.links:
            par = -1 if ln.parent < 0 else self.body_dof[ln.parent]
            I6 = spatial_inertia(ln.mass, np.asarray(ln.inertia, float), np.asarray(ln.com, float))
            if ln.joint == "free":
                zero = np.zeros((6, 6))
                chain = [("prismatic", e) for e in np.eye(3)] + \
                        [("revolute", np.eye(3)[k]) for k in (2, 1, 0)]
                for k, (jt, ax) in enumerate(chain):
                    parent.append(par if k == 0 else len(parent) - 1)
                    kind.append(jt)
                    axis.append(ax)
                    offset.append(np.asarray(ln.offset, float) if k == 0 else np.zeros(3))
                    inertia.append(I6 if k == 5 else zero)
                    limit.append(0.0)
            else:
                parent.append(par)
                kind.append("revolute")
                a = np.asarray(ln.axis, float)
                axis.append(a / np.linalg.norm(a))
                offset.append(np.asarray(ln.offset, float))
                inertia.append(I6)
                limit.append(float(ln.torque_limit))
            self.body_dof.append(len(parent) - 1)
        self.parent = parent
        self.kind = kind
        self.axis = np.array(axis)
        self.offset = np.array(offset)
        self.inertia = np.array(inertia)
        self.torque_limits = np.array(limit)
        self.dof = len(parent)
        self.S = np.zeros((self.dof, 6))
        for i in range(self.dof):
            if kind[i] == "revolute":
                self.S[i, :3] = self.axis[i]
            else:
                self.S[i, 3:] = self.axis[i]
        self.XT = np.array([xlt(o) for o in self.offset])
        pts = []
        for b, ln in enumerate(self.links):
            for p in np.asarray(ln.contact_points, float).reshape(-1, 3):
                pts.append((self.body_dof[b], p))
        self.contact_dof = [d for d, _ in pts]
        self.contact_local = np.array([p for _, p in pts]).reshape(-1, 3)


@dataclass
class RigidState:
    q: object
    qd: object

    def __post_init__(self):
        if np.shape(T.value(self.q)) != np.shape(T.value(self.qd)):
            raise ValueError("q and qd must have matching shapes")


# ---------------------------------------------------------------------------
# spatial algebra (constant-matrix helpers operate on numpy only)

def skew_np(v):
    v = np.asarray(v, float)
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def xlt(r):
    """Spatial transform for a pure translation by ``r``."""
    X = np.eye(6)
    X[3:, :3] = -skew_np(r)
    return X


def spatial_inertia(mass, Ic, com):
    C = skew_np(com)
    I6 = np.zeros((6, 6))
    I6[:3, :3] = Ic + mass * C @ C.T
    I6[:3, 3:] = mass * C
    I6[3:, :3] = mass * C.T
    I6[3:, 3:] = mass * np.eye(3)
    return I6


def skew(v):
    """Batched (B,3) -> (B,3,3) cross-product matrix."""
    # [v]x[i, k] = eps[i, j, k] v[j]
    return T.einsum("ijk,bj->bik", _EPS3, v) if isinstance(v, T.TapeVar) else \
        np.einsum("ijk,bj->bik", _EPS3, v)


def cross(a, b):
    return T.einsum("bik,bk->bi", skew(a), b)


def _rotation(axis, q):
    """Batched rotation matrix about a constant unit axis by angles q (B,)."""
    K = skew_np(axis)
    s = T.reshape(T.sin(q), (-1, 1, 1))
    c = T.reshape(T.cos(q), (-1, 1, 1))
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _blocks(A, B_, C, D):
    top = T.concatenate([A, B_], axis=-1)
    bot = T.concatenate([C, D], axis=-1)
    return T.concatenate([top, bot], axis=-2)


def joint_transforms(model: ArticulationModel, q):
    """Parent-to-child spatial transforms ``X_up`` and per-body (E, p) poses.

    E rotates world coordinates into body coordinates; p is the body origin
    in world coordinates.
    """
    n = model.dof
    B = np.shape(T.value(q))[0]
    zeros = np.zeros((B, 3, 3))
    X_up, E, P = [], [], []
    for i in range(n):
        qi = q[:, i]
        par = model.parent[i]
        if model.kind[i] == "revolute":
            Ej = T.swapaxes(_rotation(model.axis[i], qi), -1, -2)
            XJ = _blocks(Ej, zeros, zeros, Ej)
            rel = np.broadcast_to(model.offset[i], (B, 3))
        else:
            r = T.reshape(qi, (-1, 1)) * model.axis[i]
            Ej = np.broadcast_to(np.eye(3), (B, 3, 3))
            XJ = _blocks(Ej, zeros, -skew(r), Ej)
            rel = model.offset[i] + r
        X_up.append(T.matmul(XJ, model.XT[i]))
        if par < 0:
            E.append(Ej)
            P.append(rel)
        else:
            E.append(T.matmul(Ej, E[par]))
            P.append(P[par] + T.einsum("bji,bj->bi", E[par], rel))
    return X_up, E, P


def crba_mass_matrix(model: ArticulationModel, q, X_up=None):
    """Joint-space mass matrix (B, dof, dof)."""
    q = _batched(q)
    if X_up is None:
        X_up = joint_transforms(model, q)[0]
    n = model.dof
    B = np.shape(T.value(q))[0]
    Ic = [np.broadcast_to(model.inertia[i], (B, 6, 6)) for i in range(n)]
    for i in reversed(range(n)):
        p = model.parent[i]
        if p >= 0:
            Ic[p] = Ic[p] + T.matmul(T.swapaxes(X_up[i], -1, -2), T.matmul(Ic[i], X_up[i]))
    H = [[None] * n for _ in range(n)]
    for i in range(n):
        F = T.matmul(Ic[i], model.S[i])
        H[i][i] = T.matmul(F, model.S[i])
        j = i
        while model.parent[j] >= 0:
            F = T.einsum("bji,bj->bi", X_up[j], F)
            j = model.parent[j]
            H[i][j] = H[j][i] = T.matmul(F, model.S[j])
    zero = np.zeros(B)
    rows = [T.stack([H[i][j] if H[i][j] is not None else zero for j in range(n)], axis=-1)
            for i in range(n)]
    return T.stack(rows, axis=-2)


def _crm_apply(v, m):
    """Spatial motion cross product v x m for (B,6) vectors."""
    w, vl = v[:, :3], v[:, 3:]
    mw, ml = m[:, :3], m[:, 3:]
    return T.concatenate([cross(w, mw), cross(w, ml) + cross(vl, mw)], axis=-1)


def _crf_apply(v, f):
    """Spatial force cross product v x* f."""
    w, vl = v[:, :3], v[:, 3:]
    n, fl = f[:, :3], f[:, 3:]
    return T.concatenate([cross(w, n) + cross(vl, fl), cross(w, fl)], axis=-1)


def _rnea(model, q, qd, gravity, f_ext=None, X_up=None):
    n = model.dof
    B = np.shape(T.value(q))[0]
    if X_up is None:
        X_up = joint_transforms(model, q)[0]
    a0 = np.zeros((B, 6))
    a0[:, 3:] = -np.asarray(gravity, float)
    v, a, f = [None] * n, [None] * n, [None] * n
    for i in range(n):
        p = model.parent[i]
        vj = T.reshape(qd[:, i], (-1, 1)) * model.S[i]
        if p < 0:
            v[i] = vj
            a[i] = T.einsum("bij,bj->bi", X_up[i], a0)
        else:
            v[i] = T.einsum("bij,bj->bi", X_up[i], v[p]) + vj
            a[i] = T.einsum("bij,bj->bi", X_up[i], a[p]) + _crm_apply(v[i], vj)
        I = model.inertia[i]
        f[i] = T.matmul(a[i], I.T) + _crf_apply(v[i], T.matmul(v[i], I.T))
        if f_ext is not None and f_ext[i] is not None:
            f[i] = f[i] - f_ext[i]
    tau = [None] * n
    for i in reversed(range(n)):
        tau[i] = T.matmul(f[i], model.S[i])
        p = model.parent[i]
        if p >= 0:
            f[p] = f[p] + T.einsum("bji,bj->bi", X_up[i], f[i])
    return T.stack(tau, axis=-1), v


def bias_forces(model: ArticulationModel, q, qd, gravity=(0.0, 0.0, -9.81)):
    """Coriolis, centrifugal and gravity generalized forces acting on the joints.

    Sign convention: ``M qdd = tau + J^T F + c``, i.e. ``c`` is minus the
    inverse-dynamics torque at zero acceleration.
    """
    q, qd = _batched(q), _batched(qd)
    tau, _ = _rnea(model, q, qd, gravity)
    return -tau


def _point_kinematics(model, q, qd):
    X_up, E, P = joint_transforms(model, q)
    _, v = _rnea(model, q, qd, np.zeros(3), X_up=X_up)
    pos, vel = [], []
    for k, (d, l) in enumerate(zip(model.contact_dof, model.contact_local)):
        Et = T.swapaxes(E[d], -1, -2)
        pos.append(P[d] + T.matmul(Et, l))
        vb = v[d][:, 3:] + cross(v[d][:, :3], np.broadcast_to(l, (np.shape(T.value(q))[0], 3)))
        vel.append(T.einsum("bij,bj->bi", Et, vb))
    return X_up, E, pos, vel


def contact_points_world(model, q, qd):
    """World positions and velocities of all contact points, each (B, P, 3)."""
    q, qd = _batched(q), _batched(qd)
    _, _, pos, vel = _point_kinematics(model, q, qd)
    if not pos:
        B = np.shape(T.value(q))[0]
        return np.zeros((B, 0, 3)), np.zeros((B, 0, 3))
    return T.stack(pos, axis=1), T.stack(vel, axis=1)


def ground_contact(pos, vel, params: ContactParams):
    """Penalty normal force plus tanh-smoothed friction against the plane z=0.

    ``pos``/``vel`` are (..., 3); returns forces of the same shape.
    """
    d = pos[..., 2]
    vn = vel[..., 2]
    if params.smoothing > 0:
        pen = params.smoothing * T.softplus(-d / params.smoothing)
        gate = T.sigmoid(-d / params.smoothing)
    else:
        pen = T.maximum(-d, 0.0)
        gate = (T.value(d) < 0).astype(np.float64)
    fn = T.maximum(params.k_n * pen - params.k_d * vn * gate, 0.0)
    vt = vel[..., :2]
    speed = T.sqrt(T.sum(vt * vt, axis=-1) + 1e-12)
    scale = -params.mu_f * fn * T.tanh(speed / params.v_s) / speed
    ft = vt * T.expand_dims(scale, -1)
    return T.concatenate([ft, T.expand_dims(fn, -1)], axis=-1)


def contact_forces(model: ArticulationModel, q, qd, params: ContactParams):
    """Ground reaction force at every contact point, (B, P, 3) in world frame."""
    pos, vel = contact_points_world(model, q, qd)
    if np.shape(T.value(pos))[1] == 0:
        return pos
    return ground_contact(pos, vel, params)


def contact_generalized(model, q, forces):
    """J^T F for world-frame point forces ``forces`` (B, P, 3)."""
    q = _batched(q)
    B = np.shape(T.value(q))[0]
    if len(model.contact_dof) == 0:
        return np.zeros((B, model.dof))
    X_up, E, _ = joint_transforms(model, q)
    f_ext = [None] * model.dof
    for k, (d, l) in enumerate(zip(model.contact_dof, model.contact_local)):
        Fl = T.einsum("bij,bj->bi", E[d], forces[:, k])
        w = T.concatenate([cross(np.broadcast_to(l, (B, 3)), Fl), Fl], axis=-1)
        f_ext[d] = w if f_ext[d] is None else f_ext[d] + w
    zero = np.zeros((B, model.dof))
    tau, _ = _rnea(model, q, zero, np.zeros(3), f_ext=f_ext, X_up=X_up)
    return -tau


def forward_dynamics(model: ArticulationModel, q, qd, tau, F_ext=None,
                     gravity=(0.0, 0.0, -9.81)):
    """Solve ``M qdd = J^T F + c + tau`` for joint accelerations."""
    q, qd, tau = _batched(q), _batched(qd), _batched(tau)
    X_up = joint_transforms(model, q)[0]
    M = crba_mass_matrix(model, q, X_up=X_up)
    rhs = tau + bias_forces(model, q, qd, gravity)
    if F_ext is not None and np.shape(T.value(F_ext))[1] > 0:
        rhs = rhs + contact_generalized(model, q, F_ext)
    Mv = T.value(M)
    try:
        np.linalg.cholesky(Mv)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(Mv)
        raise SingularMassMatrix(
            f"mass matrix not positive definite; min eigenvalues per env {eig[:, 0]}") from None
    return T.solve(M, rhs)


def clip_torques(model, tau):
    lim = model.torque_limits
    return T.maximum(T.minimum(tau, lim), -lim)


def step_semi_implicit(state: RigidState, qdd, dt: float) -> RigidState:
    if dt <= 0:
        raise ValueError("dt must be > 0")
    qd = state.qd + dt * qdd
    return RigidState(state.q + dt * qd, qd)


def rigid_step(model, state: RigidState, tau, dt, contact: ContactParams | None = None,
               gravity=(0.0, 0.0, -9.81)) -> RigidState:
    """One clipped-torque, contact-aware semi-implicit Euler step."""
    q, qd = _batched(state.q), _batched(state.qd)
    tau = clip_torques(model, _batched(tau))
    F = contact_forces(model, q, qd, contact) if contact is not None and model.contact_dof else None
    qdd = forward_dynamics(model, q, qd, tau, F, gravity)
    return step_semi_implicit(RigidState(q, qd), qdd, dt)


def _batched(x):
    if np.ndim(T.value(x)) == 1:
        return T.reshape(x, (1, -1))
    return x


def double_pendulum(m1=1.0, m2=1.0, l1=1.0, l2=1.0, torque_limit=0.0) -> ArticulationModel:
    """Two point masses on massless rods hanging along -z, hinged about +y."""
    y = np.array([0.0, 1.0, 0.0])
    return ArticulationModel([
        Link(-1, "revolute", m1, np.zeros((3, 3)), com=np.array([0.0, 0.0, -l1]), axis=y,
             torque_limit=torque_limit),
        Link(0, "revolute", m2, np.zeros((3, 3)), com=np.array([0.0, 0.0, -l2]), axis=y,
             offset=np.array([0.0, 0.0, -l1]), torque_limit=torque_limit),
    ])
