"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line; the lines are printed together in the
pytest terminal summary (see conftest.py).  Run just this file with
``pytest tests/test_acceptance.py -v``; add ``-m "not slow"`` to skip the
training gates of criterion 8.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from softgrad import algos, cli, config, experiments, fem, mpm, nets, rigid
from softgrad import tape as T
from softgrad.checks import brute_force_targets, mpm_checkpoint_comparison, mpm_setup, random_buffer_arrays
from softgrad.envs import Observation, PointMassReach
from softgrad.gradcheck import check

from oracles import double_pendulum_error, lagrangian_double_pendulum

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
REPORT: dict[int, str] = {}


def record(n, ok, detail, soft=False):
    flag = "PASS" if ok else "FAIL"
    REPORT[n] = f"{flag} criterion {n}: {detail}" + ("  [reported, not hard-failed]" if soft and not ok else "")
    print(REPORT[n])


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -- 1 ---------------------------------------------------------------------------

def _rigid_fidelity():
    model = rigid.double_pendulum(1.0, 0.7, 1.0, 0.8, torque_limit=100.0)
    q0, qd0 = np.array([[0.4, -0.3]]), np.array([[0.1, 0.2]])

    def reward(a0):
        s, R = rigid.RigidState(q0, qd0), 0.0
        for t in range(5):
            s = rigid.rigid_step(model, s, a0 if t == 0 else np.zeros((1, 2)), 0.01)
            R = R - T.sum(s.q * s.q) - 0.1 * T.sum(s.qd * s.qd)
        return R
    return check("rigid", reward, np.array([[0.3, -0.2]]), 1e-4)


def _fem_fidelity():
    X, tets = fem.box_mesh(2, 1, 1, 0.1)
    mesh = fem.FemMesh.from_rest(X, tets)
    mat = fem.FemMaterial(1000.0, 1000.0, k_damp=0.5, actuation_scale=0.2)
    rng = np.random.default_rng(0)
    x = X[None] + np.array([0.0, 0.0, 0.5])  # lifted well clear of any ground
    v0 = rng.normal(scale=0.05, size=x.shape)
    g = np.array([0.0, 0.0, -9.81])

    def reward(a0):
        s, R = mesh.with_state(x, v0), 0.0
        for t in range(5):
            s = fem.fem_step(s, mat, a0 if t == 0 else np.zeros((1, len(tets))), g, 1e-3)
            R = R + T.mean(s.v[..., 0]) - 1e-4 * T.sum(s.x[..., 2] ** 2)
        return R
    return check("fem", reward, rng.uniform(-0.5, 0.5, (1, len(tets))), 1e-4)


def _mpm_fidelity():
    grid, mat, st = mpm_setup(np.random.default_rng(0))
    v0 = np.random.default_rng(1).normal(size=st.x.shape) * 0.1
    g = np.array([0.0, 0.0, -9.8])

    def reward(a0):
        # the action is an impulse applied to every particle before the first substep
        s, R = st.replace(v=v0 + T.reshape(a0, (1, 1, 3))), 0.0
        for _ in range(5):
            s = mpm.substep(s, grid, mat, None, g, 2e-4)
            z = s.x[..., 2]
            zc = z - T.mean(z, axis=-1, keepdims=True)
            R = R + T.mean(s.x[..., 0]) - T.mean(zc * zc)
        return R
    return check("mpm", reward, np.array([0.2, -0.1, 0.3]), 1e-3)


def test_criterion_1_gradient_fidelity():
    parts, ok = [], True
    for name, fn in (("rigid", _rigid_fidelity), ("fem", _fem_fidelity), ("mpm", _mpm_fidelity)):
        r, secs = _timed(fn)
        good = r.passed and secs < 120
        ok &= good
        parts.append(f"{name} rel_err={r.error:.1e} (tol {r.tol:.0e}, {secs:.1f}s)")
    record(1, ok, "5-step rollout reward vs central FD; " + ", ".join(parts))
    assert ok


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_checkpoint_exactness():
    (same, plain, ckpt), secs = _timed(mpm_checkpoint_comparison)
    ok = same and plain >= 4 * ckpt and secs < 120
    record(2, ok, f"32-step MPM backward bit-identical={same}; peak tape nodes {plain} -> {ckpt} "
                  f"({plain / ckpt:.1f}x, need >= 4x); {secs:.1f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_return_oracle():
    rng = np.random.default_rng(0)
    worst, exact = 0.0, True
    for _ in range(1000):
        a = random_buffer_arrays(rng, 5, 3)
        alpha, gamma, lam = rng.uniform(0, 2), rng.uniform(0.5, 1), rng.uniform(0, 1)
        x = algos.soft_td_lambda_targets(alpha=alpha, gamma=gamma, lam=lam, **a)
        worst = max(worst, float(np.abs(x - brute_force_targets(alpha=alpha, gamma=gamma, lam=lam, **a)).max()))
        soft0 = algos.soft_td_lambda_targets(alpha=0.0, gamma=gamma, lam=lam, **a)
        plain = algos.soft_td_lambda_targets(alpha=alpha, gamma=gamma, lam=lam,
                                             **dict(a, entropy_norm=np.zeros_like(a["entropy_norm"])))
        exact &= np.array_equal(soft0, plain)
    ok = worst < 1e-12 and exact
    record(3, ok, f"1000 random H=5 buffers: max |recursive - explicit sum| = {worst:.1e} (tol 1e-12); "
                  f"alpha=0 equals plain TD(lambda) exactly: {exact}")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_estimator_consistency():
    task = PointMassReach()
    pol = nets.SquashedGaussianPolicy(4, 2, hidden=(), init_log_std=-0.5)
    p = pol.init(np.random.default_rng(0))
    p["actor/mlp/w0"] = np.random.default_rng(1).normal(scale=0.3, size=p["actor/mlp/w0"].shape)
    s0 = task.initial_state(np.random.default_rng(2))
    z = algos.zobg_estimate(task, pol, p, 100_000, 8, np.random.default_rng(3), init_state=s0)
    f = algos.fobg_estimate(task, pol, p, 100_000, 8, np.random.default_rng(4), init_state=s0)
    ratios = np.concatenate([(np.abs(z.mean[k] - f.mean[k]) / np.sqrt(z.stderr[k] ** 2 + f.stderr[k] ** 2)).ravel()
                             for k in p])
    ok = bool((ratios < 3).all())
    record(4, ok, f"ZOBG vs FOBG, N=1e5, H=8, {ratios.size} coordinates: max |diff|/SE = {ratios.max():.2f} "
                  f"(need < 3)")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_entropy_machinery():
    anchors = all(algos.normalize_entropy(h, H) == want
                  for H in (-1.0, -2.5) for h, want in ((-abs(H), 0.0), (0.0, 0.5), (abs(H), 1.0)))
    rng = np.random.default_rng(0)
    signs = 0
    for _ in range(100):
        target = -rng.uniform(0.1, 3.0)
        h = rng.normal(target + rng.normal(), 1.0, size=64)
        st = algos.make_temperature(rng.uniform(0.05, 2.0), target, 5e-3, (0.7, 0.95))
        before = st.alpha
        algos.temperature_update(st, h)
        signs += np.sign(st.alpha - before) == -np.sign(h.mean() - target)
    mu, log_std, n = 0.3, -0.4, 100_000
    pol = nets.SquashedGaussianPolicy(1, 1, hidden=())
    params = {"actor/mlp/w0": np.zeros((1, 2)), "actor/mlp/b0": np.array([mu, log_std])}
    _, lp = pol.sample(params, Observation(np.zeros((n, 1))), np.random.default_rng(1).standard_normal((n, 1)))
    est = float(np.mean(-T.value(lp)))
    x, w = np.polynomial.hermite_e.hermegauss(200)
    u = mu + math.exp(log_std) * x
    quad = 0.5 * math.log(2 * math.pi * math.e) + log_std + np.sum(w / w.sum() * np.log1p(-np.tanh(u) ** 2))
    ok = anchors and signs == 100 and abs(est - quad) < 1e-2
    record(5, ok, f"anchors exact: {anchors}; temperature sign correct on {signs}/100 batches; "
                  f"entropy estimate {est:.4f} vs quadrature {quad:.4f} (|diff| {abs(est - quad):.1e}, tol 1e-2)")
    assert ok


# -- 6 ---------------------------------------------------------------------------

def _momentum(s):
    return (T.value(s.v) * np.asarray(s.mass)[..., None]).sum(axis=-2)


def test_criterion_6_conservation():
    rng = np.random.default_rng(0)
    grid, mat, st = mpm_setup(rng, ppc=2)
    st = st.replace(v=rng.normal(size=st.x.shape) * 0.1)
    p0, s = _momentum(st), st
    for _ in range(100):
        s = mpm.substep(s, grid, mat, None, np.zeros(3), 1e-4)
    drift = float(np.abs(_momentum(s) - p0).max())
    gm, _ = mpm.p2g(st.replace(C=rng.normal(size=st.C.shape)), grid, mat, 1e-4).dense(1)
    mass_err = float(abs(gm.sum() - st.mass.sum()))
    X, tets = fem.box_mesh(2, 2, 1, 0.1)
    mesh = fem.FemMesh.from_rest(X, tets)
    x = X[None] + rng.normal(scale=0.02, size=X.shape)
    f = T.value(fem.elastic_forces(mesh.with_state(x, rng.normal(size=X.shape)[None]),
                                   fem.FemMaterial(500.0, 800.0, k_damp=2.0, actuation_scale=0.3),
                                   rng.uniform(-1, 1, (1, len(tets)))))
    force_ratio = float(np.abs(f.sum(axis=1)).max() / np.abs(f).sum())
    model = rigid.double_pendulum(1.3, 0.7, 0.9, 0.6)
    _, f_M = lagrangian_double_pendulum(1.3, 0.7, 0.9, 0.6)
    q = rng.uniform(-3, 3, (50, 2))
    M = rigid.crba_mass_matrix(model, q)
    spd = bool(np.allclose(M, np.swapaxes(M, 1, 2), atol=1e-14) and np.linalg.eigvalsh(M).min() > 0)
    M_err = max(float(np.abs(M[i] - np.array(f_M(*q[i]), dtype=float)).max()) for i in range(50))
    dq = double_pendulum_error()
    ok = drift < 1e-10 and mass_err < 1e-12 and force_ratio < 1e-9 and spd and M_err < 1e-12 and dq < 1e-6
    record(6, ok, f"MPM momentum drift {drift:.1e}/100 substeps; mass |grid - particles| {mass_err:.1e}; "
                  f"FEM |sum f|/|f|_1 {force_ratio:.1e}; CRBA symmetric SPD {spd}, vs oracle {M_err:.1e}; "
                  f"double pendulum max|dq| {dq:.1e}")
    assert ok


# -- 7 ---------------------------------------------------------------------------

def _buffer(a, critics=1):
    buf = algos.RolloutBuffer()
    for t in range(a["rewards"].shape[0]):
        buf.append(None, None, a["rewards"][t], a["dones"][t], a["boot"][t], a["entropy_norm"][t],
                   a["entropy_norm"][t], [a["next_values"][t]] * critics, None)
    return buf


def test_criterion_7_algorithm_reductions():
    rng = np.random.default_rng(0)
    sapo_shac, apg_shac = 0.0, 0.0
    for _ in range(200):
        a = random_buffer_arrays(rng, 8, 4, p_done=0.2)
        gamma = rng.uniform(0.5, 1.0)
        shac = algos.actor_objective_shac(_buffer(a), gamma)
        sapo_shac = max(sapo_shac, abs(algos.actor_objective_sapo(_buffer(a), 0.0, gamma) - shac))
        z = dict(a, next_values=np.zeros_like(a["next_values"]))
        apg_shac = max(apg_shac, abs(algos.actor_objective_apg(_buffer(z), gamma)
                                     - algos.actor_objective_shac(_buffer(z), gamma)))
    ok = sapo_shac < 1e-12 and apg_shac < 1e-12
    record(7, ok, f"200 shared buffers with dones: |SAPO(alpha=0, one critic) - SHAC| max {sapo_shac:.1e}; "
                  f"|APG - SHAC(V=0)| max {apg_shac:.1e} (tol 1e-12)")
    assert ok


# -- 8 ---------------------------------------------------------------------------

SEEDS = range(5)


def _fmt(results):
    m, c = experiments.summarize(results)
    return f"{m:.2f}+-{c:.2f}"


@pytest.mark.slow
def test_criterion_8_training_gates():
    notes, hard, soft = [], True, True

    # (a) point mass: SAPO against the open-loop TrajOpt optimum
    cfg = config.load_config(CONFIGS / "point_mass_sapo.ini")
    (res,), secs = _timed(lambda: experiments.run_seeds(cfg, "sapo", [0]))
    traj = experiments.trajopt_return(cfg)
    a_ok = res.final_return >= traj - 0.05 * abs(traj) and cfg.algo.iterations <= 200 and secs <= 300
    hard &= a_ok
    notes.append(f"(a) SAPO {res.final_return:.3f} vs TrajOpt {traj:.3f} after {cfg.algo.iterations} it "
                 f"in {secs:.0f}s: {'ok' if a_ok else 'miss'}")

    # (b) pendulum ordering SAPO >= SHAC > APG
    cfg = config.load_config(CONFIGS / "pendulum.ini")
    runs = {algo: experiments.run_seeds(cfg, algo, SEEDS) for algo in ("sapo", "shac", "apg")}
    checks = [experiments.ordering(runs["sapo"], runs["shac"]), experiments.ordering(runs["sapo"], runs["apg"]),
              experiments.ordering(runs["shac"], runs["apg"])]
    # "both exceed APG" is strict
    means = {k: experiments.summarize(v)[0] for k, v in runs.items()}
    for i, (hi, lo) in enumerate((("sapo", "apg"), ("shac", "apg"))):
        if checks[i + 1] == "holds" and means[hi] == means[lo]:
            checks[i + 1] = "overlap"
    longest = max(r.wall_seconds for v in runs.values() for r in v)
    hard &= "reversed" not in checks and longest <= 1200
    soft &= all(c == "holds" for c in checks)
    notes.append(f"(b) pendulum SAPO {_fmt(runs['sapo'])}, SHAC {_fmt(runs['shac'])}, APG {_fmt(runs['apg'])} "
                 f"[sapo>=shac {checks[0]}, sapo>apg {checks[1]}, shac>apg {checks[2]}; longest run {longest:.0f}s]")

    # (c) rollflat ordering SAPO >= SHAC
    cfg = config.load_config(CONFIGS / "rollflat.ini")
    runs = {algo: experiments.run_seeds(cfg, algo, SEEDS) for algo in ("sapo", "shac")}
    c = experiments.ordering(runs["sapo"], runs["shac"])
    longest = max(r.wall_seconds for v in runs.values() for r in v)
    hard &= c != "reversed" and longest <= 1200
    soft &= c == "holds"
    notes.append(f"(c) rollflat SAPO {_fmt(runs['sapo'])}, SHAC {_fmt(runs['shac'])} [sapo>=shac {c}; "
                 f"longest run {longest:.0f}s]")

    record(8, hard and soft, "; ".join(notes), soft=hard)
    assert hard, REPORT[8]
    if not soft:
        pytest.xfail("ordering reversed within one CI overlap: " + REPORT[8])


# -- 9 ---------------------------------------------------------------------------

def _softgrad(*argv, cwd):
    r = subprocess.run([sys.executable, "-m", "softgrad.cli", *argv], capture_output=True, text=True, cwd=cwd)
    assert r.returncode == 0, r.stderr
    return r.stdout


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text((CONFIGS / "point_mass_sapo.ini").read_text().replace("iterations = 100", "iterations = 4"))
    same = {}
    for algo in algos.ALGORITHMS:
        text = cfg.read_text().replace('algo = "sapo"', f'algo = "{algo}"')
        (tmp_path / f"{algo}.ini").write_text(text)
        outs = []
        for k in range(2):
            d = tmp_path / f"{algo}{k}"
            _softgrad("train", "--config", str(tmp_path / f"{algo}.ini"), "--seed", "7", "--out-dir", str(d),
                      cwd=tmp_path)
            outs.append((d / "metrics.csv").read_bytes())
        same[f"train/{algo}"] = outs[0] == outs[1]
    ck = str(tmp_path / "sapo0" / "final.sgck")
    evals = [_softgrad("eval", "--checkpoint", ck, "--episodes", "4", "--seed", "3", cwd=tmp_path) for _ in range(2)]
    same["eval"] = evals[0] == evals[1]
    surf = []
    for k in range(2):
        _softgrad("loss-surface", "--checkpoint", ck, "--grid", "3", "--radius", "0.3", "--episodes", "2",
                  "--out-dir", str(tmp_path / f"ls{k}"), cwd=tmp_path)
        surf.append((tmp_path / f"ls{k}" / "loss_surface.csv").read_bytes())
    same["loss-surface"] = surf[0] == surf[1]
    ok = all(same.values())
    record(9, ok, "byte-identical outputs across two runs: " + ", ".join(f"{k} {v}" for k, v in same.items()))
    assert ok


# -- 10 --------------------------------------------------------------------------

def test_criterion_10_loss_surface(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text((CONFIGS / "point_mass_sapo.ini").read_text().replace("iterations = 100", "iterations = 2"))
    assert cli.main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "run")]) == 0
    ck = str(tmp_path / "run" / "final.sgck")
    assert cli.main(["loss-surface", "--checkpoint", ck, "--grid", "5", "--radius", "0", "--episodes", "3",
                     "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "loss_surface.csv").read_text().splitlines()
    header = lines[0] == "u,v,return,symlog_return"
    rows = [list(map(float, ln.split(","))) for ln in lines[1:]]
    constant = len(rows) == 25 and len({r[2] for r in rows}) == 1
    _, tr, _ = cli.load_run(ck)
    centre = rows[0][2] == algos.evaluate_policy(tr.task, tr.policy, tr.actor_params, 3, 0).mean()
    sym_col = all(r[3] == float(cli.symlog(r[2])) for r in rows)
    x = np.concatenate([np.logspace(-12, 12, 97), [0.5, 1.0, 2.0]])
    sym = cli.symlog(0.0) == 0.0 and np.array_equal(cli.symlog(-x), -cli.symlog(x))
    ok = header and constant and centre and sym_col and sym
    record(10, ok, f"header exact {header}; radius-0 5x5 grid constant {constant} and equal to centre return "
                   f"{centre}; symlog column exact {sym_col}; symlog(0)=0 and odd symmetry {sym}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
