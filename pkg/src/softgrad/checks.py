"""Finite-difference check suites per component, run by ``softgrad gradcheck``."""

from __future__ import annotations

import numpy as np

from softgrad import algos, fem, mpm, nets, rigid
from softgrad import tape as T
from softgrad.envs import make_task
from softgrad.envs.base import Observation
from softgrad.gradcheck import CheckResult, check, rel_error

COMPONENTS = ("tape", "rigid", "fem", "mpm", "envs", "nets", "returns")


def _spd(rng, n=3):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def tape_checks(rng) -> list[CheckResult]:
    x = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    y = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 4))
    M = rng.normal(size=(5, 3, 3)) + 2 * np.eye(3)
    b = rng.normal(size=(5, 3))
    idx = rng.integers(0, 3, size=7)
    # distinct entries so the max has no ties near x
    amax_x = rng.permutation(12).reshape(3, 4) + 0.1 * rng.normal(size=(3, 4))

    def wsum(f):
        return lambda z: T.sum(f(z) * np.resize(w, np.shape(T.value(f(z)))))

    cases = {
        "add": lambda z: z + 2.0 * z,
        "mul": lambda z: z * z,
        "div": lambda z: z / (2.0 + z * z),
        "power": lambda z: T.power(z * z + 1.0, 1.5),
        "exp": T.exp,
        "tanh": T.tanh,
        "sin": T.sin,
        "cos": T.cos,
        "sigmoid": T.sigmoid,
        "softplus": T.softplus,
        "silu": T.silu,
        "elu": T.elu,
        "abs": lambda z: T.abs(z + 3.0),
        "minimum": lambda z: T.minimum(z, z * 0.5 + 10.0),
        "maximum": lambda z: T.maximum(z, z * 0.5 - 10.0),
        "clamp": lambda z: T.clamp(z, -10.0, 10.0),
        "where": lambda z: T.where(x > 0, z * z, -z),
        "sum_axis": lambda z: T.sum(z * z, axis=0),
        "mean_keepdims": lambda z: T.mean(z * z, axis=1, keepdims=True) * z,
        "reshape_transpose": lambda z: T.transpose(T.reshape(z, (2, 6)), (1, 0)) ** 2,
        "getitem": lambda z: z[1:, ::2] * z[:2, 1::2],
        "concat_stack": lambda z: T.stack([T.concatenate([z, z * z], axis=1), T.concatenate([z, z], axis=1)]),
        "broadcast": lambda z: T.broadcast_to(z[0], (5, 4)) * np.arange(20.0).reshape(5, 4),
        "gather": lambda z: T.gather(z, idx) ** 2,
        "scatter_add": lambda z: T.scatter_add(z, np.array([2, 0, 2]), 4) ** 2,
        "matmul": lambda z: T.matmul(z, y),
    }
    out = [check(f"tape/{k}", wsum(f), x, 1e-6) for k, f in cases.items()]
    out.append(check("tape/log", wsum(T.log), pos, 1e-6))
    out.append(check("tape/sqrt", wsum(T.sqrt), pos, 1e-6))
    out.append(check("tape/amax", wsum(lambda z: T.amax(z, axis=-1)), amax_x, 1e-6))
    out.append(check("tape/einsum", lambda z: T.sum(T.einsum("bij,bjk->bik", z, M) ** 2), M, 1e-6))
    out.append(check("tape/det3", lambda z: T.sum(T.det3(z) ** 2), M, 1e-6))
    out.append(check("tape/cofactor3", lambda z: T.sum(T.cofactor3(z) * M), M, 1e-6))
    out.append(check("tape/solve", lambda z: T.sum(T.solve(z, b) ** 2), M, 1e-6))
    S = np.stack([_spd(rng) for _ in range(3)]) + np.diag([3.0, 1.0, 0.2])

    def svd_loss(z):
        U, s, V = T.svd3x3(z)
        return T.sum(s * s * np.array([1.0, 2.0, 3.0])) + T.sum(T.matmul(U, T.swapaxes(V, -1, -2)) * S)
    out.append(check("tape/svd3x3", svd_loss, S, 1e-6))
    return out


def rigid_checks(rng) -> list[CheckResult]:
    model = rigid.double_pendulum(1.0, 0.7, 1.0, 0.8, torque_limit=100.0)
    q0 = np.array([[0.4, -0.3]])
    qd0 = np.array([[0.1, 0.2]])

    def rollout(a0):
        s = rigid.RigidState(q0, qd0)
        s = rigid.rigid_step(model, s, a0, 0.01)
        for _ in range(4):
            s = rigid.rigid_step(model, s, np.zeros((1, 2)), 0.01)
        return T.sum(s.q * s.q) + T.sum(s.qd * s.qd)
    out = [check("rigid/5-step rollout wrt first torque", rollout, rng.normal(size=(1, 2)), 1e-4)]
    M = lambda q: T.sum(rigid.crba_mass_matrix(model, q) * np.array([[1.0, 2.0], [3.0, 4.0]]))
    out.append(check("rigid/mass matrix wrt q", M, q0, 1e-6))
    return out


def _fem_setup():
    X, tets = fem.box_mesh(2, 1, 1, 0.1)
    mesh = fem.FemMesh.from_rest(X, tets)
    mat = fem.FemMaterial(1000.0, 1000.0, k_damp=0.5, actuation_scale=0.2)
    return X, mesh, mat


def fem_checks(rng) -> list[CheckResult]:
    X, mesh, mat = _fem_setup()
    x = X[None] + rng.normal(scale=0.01, size=X.shape)
    act = rng.uniform(-0.5, 0.5, size=(1, len(mesh.tets)))
    m = mesh.with_state(x, np.zeros_like(x))
    still = fem.FemMaterial(mat.lam, mat.mu, actuation_scale=mat.actuation_scale)
    f = T.value(fem.elastic_forces(m, still, act))
    g = T.TapeGraph()
    xv = g.leaf(x)
    E = T.sum(fem.elastic_energy(mesh.with_state(xv, np.zeros_like(x)), still, act))
    grad = g.backward(E)[xv]
    out = [CheckResult("fem/energy gradient equals -forces", rel_error(grad, -f), 1e-8)]
    out.append(check("fem/energy wrt x (FD)",
                     lambda z: T.sum(fem.elastic_energy(mesh.with_state(z, np.zeros_like(x)), still, act)),
                     x, 1e-6))
    v0 = rng.normal(scale=0.05, size=x.shape)

    def rollout(a0):
        s = mesh.with_state(x, v0)
        s = fem.fem_step(s, mat, a0, np.array([0.0, 0.0, -9.81]), 1e-3)
        for _ in range(4):
            s = fem.fem_step(s, mat, np.zeros_like(act), np.array([0.0, 0.0, -9.81]), 1e-3)
        return T.sum(s.x[..., 2] ** 2) + T.sum(s.v * s.v)
    out.append(check("fem/5-step rollout wrt first actuation", rollout, act, 1e-4))
    return out


def mpm_setup(rng, ppc=1, grid_res=16):
    grid = mpm.MpmGrid(grid_res, 1.0 / grid_res)
    mat = mpm.MpmMaterial(rho=1.0, E=5000.0, nu=0.2, sigma_y=50.0)
    x, vol = mpm.sample_box([0.3, 0.3, 0.3], [0.6, 0.6, 0.5], grid.dx, ppc, rng)
    return grid, mat, mpm.MpmState.at_rest(x, 1.0, vol)


def mpm_checks(rng) -> list[CheckResult]:
    grid, mat, st = mpm_setup(rng)
    v0 = rng.normal(size=st.x.shape) * 0.2
    gravity = np.array([0.0, 0.0, -9.8])

    def rollout(v):
        s = mpm.mpm_step(st.replace(v=v), grid, mat, None, gravity, 2e-4, 5)
        return T.sum(s.x[..., 2] ** 2) + T.sum(s.v * s.v)
    out = [check("mpm/5-substep rollout wrt initial velocity", rollout, v0, 1e-3)]
    fl = mpm.MpmMaterial(rho=1.0, E=1e3, nu=0.3, kind="fluid")

    def rollout_fluid(v):
        s = mpm.mpm_step(st.replace(v=v), grid, fl, None, gravity, 2e-4, 5)
        return T.sum(s.x[..., 0] ** 2) + T.sum(s.v * s.v)
    out.append(check("mpm/fluid 5-substep rollout", rollout_fluid, v0, 1e-3))
    return out


def mpm_checkpoint_comparison(seed=0, steps=32, dt=2e-4):
    """Backward through ``steps`` substeps with and without per-substep checkpoints.

    Returns (bit_identical, peak_nodes_plain, peak_nodes_checkpointed).
    """
    grid, mat, st = mpm_setup(np.random.default_rng(seed))
    gravity = np.array([0.0, 0.0, -9.8])
    v0 = np.random.default_rng(seed + 1).normal(size=st.x.shape) * 0.1

    def run(ckpt):
        g = T.TapeGraph()
        vv = g.leaf(v0)
        s = st.replace(v=vv)

        def fn(x, v, F, C):
            o = mpm.substep(st.replace(x=x, v=v, F=F, C=C), grid, mat, None, gravity, dt)
            return o.x, o.v, o.F, o.C
        for _ in range(steps):
            if ckpt:
                x, v, F, C = g.checkpoint(fn, [s.x, s.v, s.F, s.C])
                s = s.replace(x=x, v=v, F=F, C=C)
            else:
                s = mpm.substep(s, grid, mat, None, gravity, dt)
        return g.backward(T.sum(s.x[..., 2] ** 2) + T.sum(s.v * s.v))[vv], g.stats.peak_nodes
    a, pa = run(False)
    b, pb = run(True)
    return a.tobytes() == b.tobytes(), pa, pb


def _env_reward_check(name, task_name, steps, tol, rng, params=None, first_only=False):
    task = make_task(task_name, params)
    state = {k: np.asarray(v)[None] for k, v in task.initial_state(np.random.default_rng(0)).items()}
    acts = rng.uniform(-0.5, 0.5, size=(steps, 1, task.act_dim))

    def total(a):
        seq = T.concatenate([a, acts[1:]], axis=0) if first_only else a
        s = state
        R = 0.0
        for t in range(steps):
            nxt = task.dynamics(s, seq[t])
            R = R + T.sum(task.reward(s, seq[t], nxt))
            s = nxt
        return R
    x = acts[:1] if first_only else acts
    return check(name, total, x, tol)


def env_checks(rng) -> list[CheckResult]:
    return [
        _env_reward_check("envs/point_mass_reach 5-step reward", "point_mass_reach", 5, 1e-6, rng),
        _env_reward_check("envs/mini_pendulum 5-step reward", "mini_pendulum", 5, 1e-4, rng),
        _env_reward_check("envs/mini_rollflat 3-step reward", "mini_rollflat", 3, 1e-3, rng, first_only=True),
        _env_reward_check("envs/mini_fluidmove 3-step reward", "mini_fluidmove", 3, 1e-3, rng, first_only=True),
    ]


def net_checks(rng) -> list[CheckResult]:
    out = []
    B, D, A = 4, 5, 2
    obs = Observation(rng.normal(size=(B, D)), rng.normal(size=(B, 6, 3)))
    noise = rng.normal(size=(B, A))
    pol = nets.SquashedGaussianPolicy(D, A, (8, 8), use_cloud=True)
    params = pol.init(rng)
    for k in ("actor/mlp/w0", "actor/mlp/w2", "actor/enc/pt/w0", "actor/mlp/ln0_g"):
        def f(p, k=k):
            full = dict(params)
            full[k] = p
            a, logp = pol.sample(full, obs, noise)
            return T.sum(a * np.arange(1.0, A + 1)) + T.sum(logp)
        out.append(check(f"nets/policy sample+logp wrt {k}", f, params[k], 1e-6))
    out.append(check("nets/policy wrt obs",
                     lambda z: T.sum(pol.sample(params, Observation(z, obs.point_cloud), noise)[1]),
                     obs.state_vec, 1e-6))
    critics = nets.CriticEnsemble(D, 2, (8, 8), use_cloud=True)
    cp = critics.init(rng)

    def fc(p):
        full = dict(cp)
        full["critic1/mlp/w1"] = p
        return T.sum(critics(full, obs)[1])
    out.append(check("nets/critic wrt weights", fc, cp["critic1/mlp/w1"], 1e-6))
    return out


def brute_force_targets(rewards, entropy_norm, next_values, dones, boot, alpha, gamma, lam):
    """Explicit lambda-weighted sum of soft k-step returns for every (t, env)."""
    H, B = rewards.shape
    R = rewards + alpha * entropy_norm
    out = np.zeros((H, B))
    for b in range(B):
        for t in range(H):
            # k-step returns stop at the window end or just after a done step
            K = H - t
            for j in range(t, H):
                if dones[j, b]:
                    K = j - t + 1
                    break

            def G(k):
                s = sum(gamma ** l * R[t + l, b] for l in range(k))
                e = t + k - 1
                mask = boot[e, b] if dones[e, b] else 1.0
                return s + gamma ** k * next_values[e, b] * mask
            total = sum((1 - lam) * lam ** (l - 1) * G(l) for l in range(1, K))
            out[t, b] = total + lam ** (K - 1) * G(K)
    return out


def random_buffer_arrays(rng, H, B, p_done=0.2):
    return dict(
        rewards=rng.normal(size=(H, B)), entropy_norm=rng.uniform(0, 1, size=(H, B)),
        next_values=rng.normal(size=(H, B)), dones=rng.random((H, B)) < p_done,
        boot=(rng.random((H, B)) < 0.5).astype(float),
    )


def return_checks(rng) -> list[CheckResult]:
    worst = 0.0
    for _ in range(200):
        arr = random_buffer_arrays(rng, 5, 3)
        alpha, gamma, lam = rng.uniform(0, 2), rng.uniform(0.5, 1), rng.uniform(0, 1)
        a = algos.soft_td_lambda_targets(alpha=alpha, gamma=gamma, lam=lam, **arr)
        b = brute_force_targets(alpha=alpha, gamma=gamma, lam=lam, **arr)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return [CheckResult("returns/soft TD(lambda) recursion vs explicit sum", worst, 1e-12)]


SUITES = {
    "tape": tape_checks, "rigid": rigid_checks, "fem": fem_checks, "mpm": mpm_checks,
    "envs": env_checks, "nets": net_checks, "returns": return_checks,
}


def run_component(name: str, seed: int = 0) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](np.random.default_rng(seed))
