import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from softgrad import nets
from softgrad import tape as T
from softgrad.checks import net_checks
from softgrad.envs import Observation


def _scalar_policy(mu, log_std):
    """1-D policy with no hidden layer whose output bias pins (mu, log_std)."""
    pol = nets.SquashedGaussianPolicy(1, 1, hidden=())
    p = {"actor/mlp/w0": np.zeros((1, 2)), "actor/mlp/b0": np.array([mu, log_std])}
    return pol, p


def _squashed_density(a, mu, sigma):
    u = np.arctanh(a)
    return np.exp(-0.5 * ((u - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi)) / (1 - a * a)


def _quadrature_entropy(mu, sigma, n=400_001):
    # integrate over the pre-squash variable: h(a) = h(u) + E[log(1 - tanh(u)^2)]
    u = np.linspace(mu - 12 * sigma, mu + 12 * sigma, n)
    pu = np.exp(-0.5 * ((u - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    log_det = 2 * (math.log(2) - u - np.logaddexp(0, -2 * u))
    return 0.5 * math.log(2 * math.pi * math.e * sigma ** 2) + np.trapezoid(pu * log_det, u)


def test_gradients_match_finite_differences():
    bad = [r.line() for r in net_checks(np.random.default_rng(0)) if not r.passed]
    assert not bad, "\n".join(bad)


def test_zero_weights_give_zero_output():
    p = nets.init_mlp(np.random.default_rng(0), (3, 4, 2), "m/")
    p = {k: np.zeros_like(v) if "ln" not in k else v for k, v in p.items()}
    np.testing.assert_array_equal(nets.mlp_forward(p, "m/", np.ones((5, 3))), np.zeros((5, 2)))


def test_single_layer_is_matmul(rng):
    W, b, x = rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=(4, 3))
    np.testing.assert_array_equal(nets.mlp_forward({"m/w0": W, "m/b0": b}, "m/", x), x @ W + b)


def test_input_dim_mismatch_rejected():
    p = nets.init_mlp(np.random.default_rng(0), (3, 2), "m/")
    with pytest.raises(ValueError):
        nets.mlp_forward(p, "m/", np.ones((1, 4)))


def test_zero_noise_zero_mean_gives_zero_action():
    pol, p = _scalar_policy(0.0, 0.3)
    a, _ = pol.sample(p, Observation(np.zeros((1, 1))), np.zeros((1, 1)))
    assert T.value(a)[0, 0] == 0.0


def test_small_sigma_limit_is_tanh_mu():
    pol, p = _scalar_policy(0.4, -5.0)
    a, _ = pol.sample(p, Observation(np.zeros((3, 1))), np.array([[-1.0], [0.0], [1.0]]))
    np.testing.assert_allclose(T.value(a), math.tanh(0.4), atol=math.exp(-5))


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (0.7, -0.5), (-1.2, 0.4)])
def test_log_prob_matches_squashed_density_and_integrates_to_one(mu, log_std):
    pol, p = _scalar_policy(mu, log_std)
    a = np.linspace(-0.999, 0.999, 2001)
    logp = T.value(pol.log_prob(p, Observation(np.zeros((a.size, 1))), a[:, None]))
    np.testing.assert_allclose(np.exp(logp), _squashed_density(a, mu, math.exp(log_std)), rtol=1e-10)
    # density over a fine grid in u-space, mapped back through tanh
    u = np.linspace(mu - 12 * math.exp(log_std), mu + 12 * math.exp(log_std), 200_001)
    au = np.tanh(u)
    inside = np.abs(au) < nets.ACTION_BOUND
    lp = T.value(pol.log_prob(p, Observation(np.zeros((inside.sum(), 1))), au[inside][:, None]))
    mass = np.trapezoid(np.exp(lp) * (1 - au[inside] ** 2), u[inside])
    assert abs(mass - 1.0) < 1e-4


def test_sample_log_prob_agrees_with_log_prob(rng):
    pol = nets.SquashedGaussianPolicy(3, 2, hidden=(8,))
    p = pol.init(rng)
    obs = Observation(rng.normal(size=(6, 3)))
    a, lp = pol.sample(p, obs, rng.normal(size=(6, 2)))
    np.testing.assert_allclose(T.value(lp), T.value(pol.log_prob(p, obs, a)), rtol=1e-9)


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (0.5, -1.0)])
def test_entropy_estimate_matches_quadrature(mu, log_std):
    pol, p = _scalar_policy(mu, log_std)
    n = 100_000
    noise = np.random.default_rng(1).standard_normal((n, 1))
    _, lp = pol.sample(p, Observation(np.zeros((n, 1))), noise)
    h = float(np.mean(nets.entropy_estimate(T.value(lp))))
    assert abs(h - _quadrature_entropy(mu, math.exp(log_std))) < 1e-2


def test_entropy_grows_with_sigma():
    noise = np.random.default_rng(2).standard_normal((20_000, 1))
    hs = []
    for log_std in (-1.0, -0.5):
        pol, p = _scalar_policy(0.0, log_std)
        _, lp = pol.sample(p, Observation(np.zeros((noise.shape[0], 1))), noise)
        hs.append(np.mean(-T.value(lp)))
    assert hs[1] > hs[0]


@given(st.floats(-30, 30), st.floats(-10, 10), st.floats(-8, 8))
def test_actions_strictly_inside_and_log_prob_finite(mu, log_std, xi):
    pol, p = _scalar_policy(mu, log_std)
    a, lp = pol.sample(p, Observation(np.zeros((1, 1))), np.array([[xi]]))
    assert np.abs(T.value(a)).max() < 1.0
    assert np.isfinite(T.value(lp)).all()


def test_log_std_is_clamped():
    pol, p = _scalar_policy(0.0, 9.0)
    _, log_std = pol.dist(p, Observation(np.zeros((1, 1))))
    assert T.value(log_std)[0, 0] == 2.0


def test_reparameterized_mean_gradient_matches_common_noise_fd():
    noise = np.random.default_rng(3).standard_normal((500, 1))
    obs = Observation(np.zeros((500, 1)))

    def mean_action(mu):
        pol, p = _scalar_policy(0.0, -0.3)
        p["actor/mlp/b0"] = T.concatenate([mu, np.array([-0.3])]) if isinstance(mu, T.TapeVar) \
            else np.array([mu[0], -0.3])
        return T.mean(pol.sample(p, obs, noise)[0])
    g = T.TapeGraph()
    m = g.leaf(np.array([0.2]))
    grad = g.backward(mean_action(m))[m][0]
    eps = 1e-6
    fd = (mean_action(np.array([0.2 + eps])) - mean_action(np.array([0.2 - eps]))) / (2 * eps)
    assert abs(grad - fd) < 1e-6 * max(1.0, abs(fd))


def test_state_independent_sigma_parameter():
    pol = nets.SquashedGaussianPolicy(2, 3, hidden=(4,), state_dependent_sigma=False, init_log_std=-1.0)
    p = pol.init(np.random.default_rng(0))
    np.testing.assert_array_equal(p["actor/log_std"], np.full(3, -1.0))
    _, log_std = pol.dist(p, Observation(np.ones((5, 2))))
    assert T.value(log_std).shape == (5, 3)


def test_point_encoder_permutation_invariant(rng):
    enc = nets.PointEncoder("e/")
    p = enc.init(rng)
    pts = rng.normal(size=(2, 16, 3))
    perm = rng.permutation(16)
    assert np.array_equal(enc(p, pts), enc(p, pts[:, perm]))


def test_point_encoder_repeated_point_equals_single(rng):
    enc = nets.PointEncoder("e/")
    p = enc.init(rng)
    pt = rng.normal(size=(1, 1, 3))
    # row count changes the BLAS blocking, so allow last-bit rounding
    np.testing.assert_allclose(enc(p, np.repeat(pt, 7, axis=1)), enc(p, pt), rtol=1e-12, atol=1e-15)


def test_point_encoder_gradient_reaches_max_points(rng):
    enc = nets.PointEncoder("e/", hidden=(4,), embed=3)
    p = enc.init(rng)
    pts = rng.normal(size=(1, 5, 3))
    g = T.TapeGraph()
    x = g.leaf(pts)
    grad = g.backward(T.sum(enc(p, x)))[x]
    h = T.value(nets.mlp_forward(p, "e/pt/", pts))
    winners = set(np.argmax(h[0], axis=0))
    for k in range(5):
        assert (np.abs(grad[0, k]).sum() > 0) == (k in winners)


def test_critic_members_have_distinct_parameters(rng):
    ens = nets.CriticEnsemble(4, 2, (8,))
    p = ens.init(rng)
    assert not np.array_equal(p["critic0/mlp/w0"], p["critic1/mlp/w0"])
    v0, v1 = ens(p, Observation(rng.normal(size=(3, 4))))
    assert v0.shape == (3,) and not np.array_equal(v0, v1)
    with pytest.raises(ValueError):
        nets.CriticEnsemble(4, 0)


def test_adamw_first_step_hand_computed():
    opt = nets.AdamW(lr=0.1, betas=(0.9, 0.999))
    p = {"x": np.array([0.0])}
    opt.step(p, {"x": np.array([1.0])})
    assert p["x"][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_zero_grad_no_decay_is_noop():
    opt = nets.AdamW(lr=0.1)
    p = {"x": np.array([1.5, -2.0])}
    opt.step(p, {"x": np.zeros(2)})
    np.testing.assert_array_equal(p["x"], [1.5, -2.0])


def test_adamw_decay_is_decoupled():
    opt = nets.AdamW(lr=0.1, weight_decay=0.5)
    p = {"x": np.array([2.0])}
    opt.step(p, {"x": np.zeros(1)})
    assert p["x"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_clips_global_norm_before_moments():
    opt = nets.AdamW(lr=0.1, grad_clip=0.5)
    p = {"a": np.zeros(2), "b": np.zeros(1)}
    opt.step(p, {"a": np.array([6.0, 0.0]), "b": np.array([8.0])})
    np.testing.assert_allclose(opt.m["a"], 0.1 * np.array([0.3, 0.0]))
    np.testing.assert_allclose(opt.m["b"], 0.1 * np.array([0.4]))


def test_adamw_skips_non_finite_step(caplog):
    opt = nets.AdamW(lr=0.1)
    p = {"x": np.array([1.0])}
    assert not opt.step(p, {"x": np.array([np.nan])})
    assert p["x"][0] == 1.0 and opt.step_count == 0 and opt.skipped == 1
    assert "non-finite" in caplog.text


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b/c": np.array(np.pi), "e": np.zeros((0, 2))}
    nets.save_checkpoint(tmp_path / "x.sgck", arrays, {"k": [1, 2]})
    out, meta = nets.load_checkpoint(tmp_path / "x.sgck")
    assert meta == {"k": [1, 2]} and list(out) == list(arrays)
    for k in arrays:
        assert out[k].shape == arrays[k].shape and out[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(nets.CheckpointError):
        nets.load_checkpoint(tmp_path / "bad")
    nets.save_checkpoint(tmp_path / "ok", {"a": np.ones(2)})
    (tmp_path / "long").write_bytes((tmp_path / "ok").read_bytes() + b"\0")
    with pytest.raises(nets.CheckpointError, match="trailing"):
        nets.load_checkpoint(tmp_path / "long")
    with pytest.raises(nets.CheckpointError, match="a: model"):
        nets.check_compatible({"a": np.ones(3)}, {"a": np.ones(2)})
