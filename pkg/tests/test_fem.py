import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from softgrad import fem
from softgrad import tape as T
from softgrad.checks import fem_checks


def _mesh():
    X, tets = fem.box_mesh(2, 2, 1, 0.1)
    return X, fem.FemMesh.from_rest(X, tets)


def test_gradients_and_energy_consistency():
    bad = [r.line() for r in fem_checks(np.random.default_rng(0)) if not r.passed]
    assert not bad, "\n".join(bad)


@given(st.integers(0, 10_000))
def test_internal_forces_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    X, mesh = _mesh()
    mat = fem.FemMaterial(500.0, 800.0, k_damp=2.0, actuation_scale=0.3)
    x = X[None] + rng.normal(scale=0.02, size=X.shape)
    v = rng.normal(size=X.shape)[None]
    act = rng.uniform(-1, 1, size=(1, len(mesh.tets)))
    f = T.value(fem.elastic_forces(mesh.with_state(x, v), mat, act))
    assert np.abs(f.sum(axis=1)).max() < 1e-9 * np.abs(f).sum()


def test_rest_shape_is_stress_free():
    X, mesh = _mesh()
    mat = fem.FemMaterial(1000.0, 1000.0)
    f = fem.elastic_forces(mesh.with_state(X[None], np.zeros((1,) + X.shape)), mat)
    assert np.abs(f).max() < 1e-10


@given(arrays(np.float64, (3, 3), elements=st.floats(-0.3, 0.3)))
def test_analytic_piola_matches_energy_derivative(d):
    F = (np.eye(3) + d)[None]
    mat = fem.FemMaterial(700.0, 300.0, actuation_scale=0.2)
    act = np.array([0.4])
    g = T.TapeGraph()
    Fv = g.leaf(F)
    grad = g.backward(T.sum(fem.neo_hookean_energy(Fv, mat, act)))[Fv]
    np.testing.assert_allclose(fem.first_piola(F, mat, act), grad, rtol=1e-10, atol=1e-10)


def test_rotation_invariance_of_energy():
    mat = fem.FemMaterial(700.0, 300.0)
    F = np.eye(3) + 0.1 * np.arange(9.0).reshape(3, 3) / 9
    c, s = np.cos(0.7), np.sin(0.7)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    e1 = fem.neo_hookean_energy(F[None], mat)
    e2 = fem.neo_hookean_energy((R @ F)[None], mat)
    np.testing.assert_allclose(e1, e2, rtol=1e-13)


def test_inverted_element_still_has_finite_energy():
    mat = fem.FemMaterial(700.0, 300.0)
    F = np.diag([1.0, 1.0, -0.5])[None]
    assert np.isfinite(fem.neo_hookean_energy(F, mat)).all()


def test_free_fall_without_elastic_forces():
    X, mesh = _mesh()
    mat = fem.FemMaterial(1000.0, 1000.0)
    m = mesh.with_state(X[None], np.zeros((1,) + X.shape))
    g = np.array([0.0, 0.0, -9.81])
    for _ in range(10):
        m = fem.fem_step(m, mat, None, g, 1e-3)
    np.testing.assert_allclose(m.v[..., 2], -9.81 * 1e-2, rtol=1e-9)


def test_degenerate_mesh_rejected():
    X = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    with pytest.raises(ValueError):
        fem.FemMesh.from_rest(X, np.array([[0, 1, 2, 3]]))


def test_material_validation():
    with pytest.raises(ValueError):
        fem.FemMaterial(-1.0, 1.0)
    with pytest.raises(ValueError):
        fem.FemMaterial(1.0, 1.0, k_damp=-1.0)


def test_blow_up_is_reported():
    X, mesh = _mesh()
    mat = fem.FemMaterial(1e12, 1e12)
    x = X[None] * np.array([1.0, 1.0, 3.0])
    m = mesh.with_state(x, np.zeros_like(x))
    with pytest.raises(fem.SimulationError):
        for _ in range(200):
            m = fem.fem_step(m, mat, None, np.zeros(3), 1e-2)


def test_mesh_round_trip(tmp_path):
    X, tets = fem.quadruped_mesh(0.05)
    fem.save_mesh(tmp_path / "q.mesh", X, tets)
    X2, t2 = fem.load_mesh(tmp_path / "q.mesh")
    np.testing.assert_array_equal(X, X2)
    np.testing.assert_array_equal(tets, t2)


def test_scaled_mesh_scales_mass_and_volume():
    _, mesh = _mesh()
    s = mesh.scaled(np.array([1.0, 2.0]))
    np.testing.assert_allclose(s.particle_mass[1], 8 * mesh.particle_mass)
    np.testing.assert_allclose(s.rest_volume[1], 8 * mesh.rest_volume)
