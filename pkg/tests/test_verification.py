import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hphdg.config import parse_config
from hphdg.driver import make_discretization, mesh_integral
from hphdg.mesh import Mesh, square_mesh
from hphdg.physics import EulerModel, GasModel
from hphdg.verification import (convergence_orders, fd_jacobian, layer_scalar, mms_euler,
                                mms_scalar, monolithic_solve, step_forcing_scalar)

CFG = parse_config("[run]\ncase = mms-euler\n[adaptation]\np_max = 5\n")


def _fd_div(flux, x, h=1e-5):
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    return ((flux(x + ex)[0] - flux(x - ex)[0]) + (flux(x + ey)[1] - flux(x - ey)[1])) / (2 * h)


def test_scalar_source_example():
    pts = np.array([[0.3, 0.7], [0.1, 0.2]])
    case = mms_scalar(b=(1.0, 0.0), nu=0.1)
    X, Y = pts[:, 0], pts[:, 1]
    ref = (math.pi * np.cos(math.pi * X) * np.sin(math.pi * Y)
           + 0.2 * math.pi**2 * np.sin(math.pi * X) * np.sin(math.pi * Y))
    np.testing.assert_allclose(case.source(pts)[:, 0], ref, rtol=1e-14)


def test_scalar_exact_value_and_boundary():
    case = mms_scalar()
    assert case.J_exact == pytest.approx(0.405285, abs=1e-6)
    assert mesh_integral(square_mesh(2), case.exact) == pytest.approx(case.J_exact, rel=1e-12)
    t = np.linspace(0, 1, 7)
    edges = np.concatenate([np.column_stack([t, 0 * t]), np.column_stack([t, 1 + 0 * t]),
                            np.column_stack([0 * t, t]), np.column_stack([1 + 0 * t, t])])
    assert np.abs(case.exact(edges)).max() < 1e-15


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(-2, 2), st.floats(-2, 2),
       st.floats(0.01, 1.0))
def test_scalar_source_matches_fd(x, y, bx, by, nu):
    case = mms_scalar(b=(bx, by), nu=nu)
    p = np.array([[x, y]])
    h = 1e-4

    def w(q):
        return case.exact(np.atleast_2d(q))[0, 0]

    wx = (w(p + [h, 0]) - w(p - [h, 0])) / (2 * h)
    wy = (w(p + [0, h]) - w(p - [0, h])) / (2 * h)
    lap = (w(p + [h, 0]) + w(p - [h, 0]) + w(p + [0, h]) + w(p - [0, h]) - 4 * w(p)) / h**2
    assert case.source(p)[0, 0] == pytest.approx(bx * wx + by * wy - nu * lap, abs=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_euler_source_matches_fd_divergence(x, y):
    case = mms_euler()
    model = EulerModel(GasModel(gamma=1.4, mach=0.5))
    p = np.array([x, y])

    def flux(q):
        w = case.exact(q[None, :])[0]
        rho, mu, mv, E = w
        pr = 0.4 * (E - 0.5 * (mu * mu + mv * mv) / rho)
        u, v = mu / rho, mv / rho
        return (np.array([mu, mu * u + pr, mv * u, (E + pr) * u]),
                np.array([mv, mu * v, mv * v + pr, (E + pr) * v]))

    np.testing.assert_allclose(case.source(p[None, :])[0], _fd_div(flux, p), atol=1e-7)
    # the hand-coded flux agrees with the model's convective flux
    w = case.exact(p[None, :])
    F = np.asarray(model.convective_flux(w[0]))
    np.testing.assert_allclose(F.reshape(4, 2) if F.shape == (8,) else F,
                               np.column_stack(flux(p)), atol=1e-13)


def test_euler_zero_amplitude_has_zero_source():
    case = mms_euler(amplitude=0.0)
    pts = np.random.default_rng(3).random((20, 2))
    assert np.abs(case.source(pts)).max() == 0.0
    w = case.exact(pts)
    np.testing.assert_allclose(w, np.broadcast_to(w[0], w.shape), rtol=0, atol=0)


def test_euler_state_admissible():
    case = mms_euler()
    g = np.linspace(0, 1, 41)
    pts = np.column_stack([a.ravel() for a in np.meshgrid(g, g)])
    w = case.exact(pts)
    p = 0.4 * (w[:, 3] - 0.5 * (w[:, 1] ** 2 + w[:, 2] ** 2) / w[:, 0])
    assert w[:, 0].min() > 0.7 and p.min() > 0.5 / 1.4


@pytest.mark.parametrize("method", ["hdg", "dg"])
@pytest.mark.parametrize("which", ["scalar", "euler"])
def test_exact_solution_residual_vanishes_under_refinement(method, which):
    case = mms_scalar() if which == "scalar" else mms_euler()
    res = []
    for n in (2, 4, 8):
        d = make_discretization(method, square_mesh(n), case.problem, 3, CFG)
        res.append(np.abs(d.residual(d.project(case.exact))).max())
    assert res[1] < res[0] / 8 and res[2] < res[1] / 8


def test_layer_functional_value():
    k, c = 20.0, 0.55
    case = layer_scalar(k=k, center=c)
    # midpoint rule on a fine grid as an independent check
    n = 4000
    t = (np.arange(n) + 0.5) / n
    Ix = np.sum(16 * t * (1 - t) * 0.5 * (1 + np.tanh(k * (t - c)))) / n
    assert case.J_exact == pytest.approx(Ix / 6, rel=1e-6)
    assert case.J_exact == pytest.approx(mesh_integral(square_mesh(16), case.exact), rel=1e-8)


def test_layer_source_matches_fd():
    case = layer_scalar()
    pts = np.array([[0.5, 0.3], [0.56, 0.8], [0.2, 0.5]])
    h = 1e-4
    ex, ey = np.array([h, 0]), np.array([0, h])
    lap = (case.exact(pts + ex) + case.exact(pts - ex) + case.exact(pts + ey)
           + case.exact(pts - ey) - 4 * case.exact(pts)) / h**2
    np.testing.assert_allclose(case.source(pts), -lap, rtol=1e-5, atol=1e-4)


def test_step_forcing():
    case = step_forcing_scalar(0.45)
    pts = np.array([[0.44, 0.5], [0.46, 0.5]])
    np.testing.assert_array_equal(case.source(pts)[:, 0], [0.0, 1.0])
    assert case.J_exact is None


def test_monolithic_oracle_residual_and_size_guard():
    case = mms_scalar()
    d = make_discretization("hdg", square_mesh(1), case.problem, 1, CFG)
    lin = d.linearize(d.zeros())
    dx = monolithic_solve(lin)
    J = lin.full_matrix().toarray()
    assert np.linalg.norm(J @ dx + lin.r) < 1e-11 * max(1.0, np.linalg.norm(lin.r))
    with pytest.raises(ValueError, match="too large"):
        monolithic_solve(lin, max_dof=3)


def test_monolithic_oracle_is_permutation_invariant():
    case = mms_scalar()
    mesh = square_mesh(2)
    perm = np.random.default_rng(5).permutation(mesh.n_elements)
    other = Mesh.from_arrays(mesh.vertices, mesh.elements[perm], mesh.boundary_triples())
    vals = []
    for m in (mesh, other):
        d = make_discretization("hdg", m, case.problem, 1, CFG)
        lin = d.linearize(d.zeros())
        vals.append(d.functional(monolithic_solve(lin)))
    assert vals[0] == pytest.approx(vals[1], rel=1e-12)


def test_convergence_orders():
    hs = np.array([1, 0.5, 0.25])
    np.testing.assert_allclose(convergence_orders(hs, 3 * hs**2), [2.0, 2.0])


def test_fd_jacobian_of_linear_map():
    A = np.array([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_allclose(fd_jacobian(lambda v: A @ v, np.ones(2)), A, atol=1e-9)
