import numpy as np
import pytest

from hphdg.dg import DG
from hphdg.hdg import HDG
from hphdg.mesh import Mesh, square_mesh
from hphdg.physics import GasModel, Problem, ScalarModel, Stabilization, make_model
from hphdg.solver import nonlinear_solve
from hphdg.verification import convergence_orders, fd_jacobian, mms_euler, mms_scalar


def ns_problem():
    return Problem(make_model("navier-stokes", mach=0.5, reynolds=50.0),
                   exact=mms_euler(amplitude=0.5).exact)


PROBLEMS = {
    "diffusion": lambda: mms_scalar(b=(0.0, 0.0), nu=1.0).problem,
    "convection-diffusion": lambda: mms_scalar(b=(1.0, 0.5), nu=0.1).problem,
    "euler": lambda: mms_euler().problem,
    "navier-stokes": ns_problem,
}

BND = "dirichlet-mms"


def single_triangle():
    return Mesh.from_arrays([[0, 0], [1, 0], [0, 1]], [(0, 1, 2)],
                            [(0, 1, BND), (1, 2, BND), (2, 0, BND)])


def two_triangles():
    return Mesh.from_arrays([[0, 0], [1, 0], [1, 1], [0, 1]], [(0, 1, 2), (0, 2, 3)],
                            [(0, 1, BND), (1, 2, BND), (2, 3, BND), (3, 0, BND)])


@pytest.mark.parametrize("mesh, expected", [(single_triangle, 9), (two_triangles, 36)])
def test_nnz_examples(mesh, expected):
    d = DG(mesh(), PROBLEMS["diffusion"](), 1)
    assert d.nnz() == expected
    assert d.linearize(d.zeros()).full_matrix().nnz == expected


def test_nnz_mixed_degrees_matches_assembled_matrix():
    mesh = square_mesh(2, jitter=0.2, rng=0)
    for name in ("diffusion", "euler"):
        prob = PROBLEMS[name]()
        d = DG(mesh, prob, np.array([0, 1, 2, 3, 1, 2, 0, 4]))
        assert d.linearize(d.project(prob.exact)).full_matrix().nnz == d.nnz()


def test_nnz_scales_with_system_size_squared():
    mesh = square_mesh(3)
    a = DG(mesh, PROBLEMS["diffusion"](), 2).nnz()
    b = DG(mesh, PROBLEMS["euler"](), 2).nnz()
    assert b == 16 * a


def test_constant_state_has_zero_residual():
    const = lambda x: np.full((len(x), 1), -1.5)  # noqa: E731
    d = DG(square_mesh(3, jitter=0.2, rng=1), Problem(ScalarModel(b=(1.0, 0.3), nu=0.2), exact=const), 2)
    assert np.abs(d.residual(d.project(const))).max() < 1e-12
    w = GasModel(mach=0.5, aoa_deg=10.0).freestream()
    stream = lambda x: np.tile(w, (len(x), 1))  # noqa: E731
    model = make_model("navier-stokes", mach=0.5, aoa=10.0, reynolds=100.0)
    d = DG(square_mesh(2, jitter=0.2, rng=1), Problem(model, exact=stream), 2)
    assert np.abs(d.residual(d.project(stream))).max() < 1e-12


@pytest.mark.parametrize("name", sorted(PROBLEMS))
@pytest.mark.parametrize("p", [1, 2])
def test_jacobian_matches_finite_differences(name, p, rng):
    prob = PROBLEMS[name]()
    d = DG(square_mesh(2, jitter=0.2, rng=3), prob, p)
    x = d.project(prob.exact)
    x = x + 0.02 * rng.normal(size=x.shape) * (np.abs(x) + 0.1)
    J = d.linearize(x).full_matrix().toarray()
    fd = fd_jacobian(d.residual, x, h=1e-6)
    assert np.abs(J - fd).max() <= 1e-6 * max(1.0, np.abs(J).max())


def test_shock_capturing_jacobian_matches_finite_differences(rng):
    prob = PROBLEMS["euler"]()
    d = DG(square_mesh(2, jitter=0.2, rng=4), prob, 2,
           stabilization=Stabilization(shock_capturing=True, eps0=0.5))
    x = d.project(prob.exact)
    x = x + 0.05 * rng.normal(size=x.shape) * (np.abs(x) + 0.1)
    assert d.shock_viscosity(x).max() > 0
    J = d.linearize(x).full_matrix().toarray()
    fd = fd_jacobian(d.residual, x, h=1e-7)
    assert np.abs(J - fd).max() <= 1e-6 * max(1.0, np.abs(J).max())


def test_time_term_adds_mass_matrix(rng):
    prob = PROBLEMS["euler"]()
    d = DG(square_mesh(2), prob, 1)
    x = d.project(prob.exact)
    dt = rng.uniform(0.1, 1.0, d.mesh.n_elements)
    diff = d.linearize(x, dt=dt).full_matrix() - d.linearize(x).full_matrix()
    assert abs(diff - d.mass_matrix(dt)).max() < 1e-14


def test_scalar_mms_rate_p1():
    case = mms_scalar()
    errs = []
    for n in (2, 4, 8):
        d = DG(square_mesh(n), case.problem, 1)
        errs.append(d.l2_error(nonlinear_solve(d).x, case.exact))
    assert abs(convergence_orders([1, 0.5, 0.25], errs)[-1] - 2.0) < 0.15


def test_dg_and_hdg_functionals_approach_each_other():
    case = mms_scalar()
    gaps = []
    for n in (2, 4, 8):
        vals = []
        for cls in (DG, HDG):
            d = cls(square_mesh(n), case.problem, 1)
            vals.append(d.functional(nonlinear_solve(d).x))
        gaps.append(abs(vals[0] - vals[1]))
    assert gaps[2] < gaps[1] < gaps[0]
