"""Manufactured solutions and independent oracles used by the test suite."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .physics import (EulerModel, GasModel, Problem, ScalarModel, TargetFunctional)

PI = math.pi


@dataclass
class ManufacturedCase:
    problem: Problem
    exact: object
    source: object
    J_exact: float | None = None
    name: str = ""


# ---------------------------------------------------------------------------
# Scalar convection-diffusion
# ---------------------------------------------------------------------------

def mms_scalar(b=(1.0, 0.0), nu: float = 0.1) -> ManufacturedCase:
    """w = sin(pi x) sin(pi y) on the unit square with J = int w = 4/pi^2."""
    b = tuple(float(v) for v in b)

    def exact(x):
        return (np.sin(PI * x[:, 0]) * np.sin(PI * x[:, 1]))[:, None]

    def source(x):
        sx, sy = np.sin(PI * x[:, 0]), np.sin(PI * x[:, 1])
        cx, cy = np.cos(PI * x[:, 0]), np.cos(PI * x[:, 1])
        conv = b[0] * PI * cx * sy + b[1] * PI * sx * cy
        return (conv + 2.0 * nu * PI**2 * sx * sy)[:, None]

    model = ScalarModel(b=b, nu=nu)
    fun = TargetFunctional("mms-volume")
    prob = Problem(model, source=source, exact=exact, functional=fun)
    return ManufacturedCase(prob, exact, source, 4.0 / PI**2, "scalar-sine")


def layer_scalar(k: float = 20.0, center: float = 0.55, nu: float = 1.0) -> ManufacturedCase:
    """Pure diffusion with an interior tanh layer across x = center.

    w = 16 x(1-x) y(1-y) * (1 + tanh(k (x - center))) / 2, J = int w.
    """
    def parts(x):
        X, Y = x[:, 0], x[:, 1]
        g = 16.0 * X * (1 - X) * Y * (1 - Y)
        gx = 16.0 * (1 - 2 * X) * Y * (1 - Y)
        gy = 16.0 * X * (1 - X) * (1 - 2 * Y)
        gxx = -32.0 * Y * (1 - Y)
        gyy = -32.0 * X * (1 - X)
        t = np.tanh(k * (X - center))
        h = 0.5 * (1 + t)
        hx = 0.5 * k * (1 - t**2)
        hxx = -k * k * t * (1 - t**2)
        return g, gx, gy, gxx, gyy, h, hx, hxx

    def exact(x):
        g, *_, h, hx, hxx = parts(x)
        return (g * h)[:, None]

    def source(x):
        g, gx, gy, gxx, gyy, h, hx, hxx = parts(x)
        lap = gxx * h + 2 * gx * hx + g * hxx + gyy * h
        return (-nu * lap)[:, None]

    def integrand_x(X):
        return 16.0 * X * (1 - X) * 0.5 * (1 + np.tanh(k * (X - center)))

    Ix, _ = integrate.quad(integrand_x, 0.0, 1.0, points=[center], epsabs=1e-13, epsrel=1e-13, limit=200)
    J = Ix * (1.0 / 6.0)  # int_0^1 y(1-y) dy = 1/6, factor 16 kept in the x part
    model = ScalarModel(b=(0.0, 0.0), nu=nu)
    prob = Problem(model, source=source, exact=exact, functional=TargetFunctional("mms-volume"))
    return ManufacturedCase(prob, exact, source, J, "scalar-layer")


def step_forcing_scalar(x_step: float = 0.45, nu: float = 1.0) -> ManufacturedCase:
    """Pure diffusion with forcing 1 for x > x_step and 0 elsewhere, w = 0 on the boundary.

    The second derivative of the solution jumps across the line x = x_step.
    No closed-form functional value is available.
    """
    def source(x):
        return (x[:, 0] > x_step).astype(float)[:, None]

    def zero(x):
        return np.zeros((len(x), 1))

    model = ScalarModel(b=(0.0, 0.0), nu=nu)
    prob = Problem(model, source=source, exact=zero, functional=TargetFunctional("mms-volume"))
    return ManufacturedCase(prob, None, source, None, "scalar-step")


# ---------------------------------------------------------------------------
# Euler
# ---------------------------------------------------------------------------

def _euler_primitives(x, A, gamma, u0=0.5, v0=0.1, k=PI):
    X, Y = k * x[:, 0], k * x[:, 1]
    sx, cx, sy, cy = np.sin(X), np.cos(X), np.sin(Y), np.cos(Y)
    p0 = 1.0 / gamma
    rho = 1.0 + 0.2 * A * sx * cy
    rho_x = 0.2 * A * k * cx * cy
    rho_y = -0.2 * A * k * sx * sy
    u = u0 + 0.1 * A * cx * sy
    u_x = -0.1 * A * k * sx * sy
    u_y = 0.1 * A * k * cx * cy
    v = v0 + 0.1 * A * sx * sy
    v_x = 0.1 * A * k * cx * sy
    v_y = 0.1 * A * k * sx * cy
    p = p0 * (1.0 + 0.2 * A * cx * cy)
    p_x = -0.2 * A * p0 * k * sx * cy
    p_y = -0.2 * A * p0 * k * cx * sy
    return (rho, rho_x, rho_y), (u, u_x, u_y), (v, v_x, v_y), (p, p_x, p_y)


def mms_euler(amplitude: float = 1.0, gamma: float = 1.4, u0: float = 0.5, v0: float = 0.1,
              wavenumber: float = PI) -> ManufacturedCase:
    """Smooth subsonic perturbation of a uniform stream (|v| ~ 0.5, c ~ 1)."""
    g1 = gamma - 1.0

    def exact(x):
        (rho, _, _), (u, _, _), (v, _, _), (p, _, _) = _euler_primitives(x, amplitude, gamma, u0, v0, wavenumber)
        E = p / g1 + 0.5 * rho * (u * u + v * v)
        return np.column_stack([rho, rho * u, rho * v, E])

    def source(x):
        (r, rx, ry), (u, ux, uy), (v, vx, vy), (p, px, py) = _euler_primitives(x, amplitude, gamma, u0, v0, wavenumber)
        q2 = u * u + v * v
        H = gamma * p / g1 + 0.5 * r * q2
        Hx = gamma * px / g1 + 0.5 * rx * q2 + r * (u * ux + v * vx)
        Hy = gamma * py / g1 + 0.5 * ry * q2 + r * (u * uy + v * vy)
        s0 = rx * u + r * ux + ry * v + r * vy
        s1 = rx * u * u + 2 * r * u * ux + px + ry * u * v + r * uy * v + r * u * vy
        s2 = rx * u * v + r * ux * v + r * u * vx + ry * v * v + 2 * r * v * vy + py
        s3 = ux * H + u * Hx + vy * H + v * Hy
        return np.column_stack([s0, s1, s2, s3])

    model = EulerModel(GasModel(gamma=gamma, mach=0.5))
    prob = Problem(model, source=source, exact=exact)
    return ManufacturedCase(prob, exact, source, None, "euler-smooth")


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def monolithic_solve(linearization, max_dof: int = 5000):
    """Dense solve of the uncondensed Newton system J dx = -r."""
    J = linearization.full_matrix().toarray()
    if J.shape[0] > max_dof:
        raise ValueError(f"system too large for the dense oracle ({J.shape[0]} > {max_dof})")
    try:
        return np.linalg.solve(J, -linearization.r)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"monolithic system is singular: {exc}") from None


def convergence_orders(hs, errors) -> np.ndarray:
    """Observed orders log(e_i/e_{i+1}) / log(h_i/h_{i+1})."""
    hs, errors = np.asarray(hs, float), np.asarray(errors, float)
    return np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:])


def fd_jacobian(fun, x, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian (dense)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fun(x + e) - fun(x - e)) / (2 * h))
    return np.column_stack(cols)
