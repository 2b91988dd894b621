"""Fluxes, boundary states and output functionals.

All point-wise functions take a single state ``w`` of shape (m,) (and a
gradient ``q`` of shape (m, 2)) and are written with ``jax.numpy`` so the
discretizations can differentiate through them. Vectorize with ``jax.vmap``.

Compressible flow is nondimensionalized with the free-stream density and
speed of sound: rho_inf = 1, c_inf = 1, p_inf = 1/gamma, T_inf = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

SUTHERLAND_C1 = 1.458e-6  # kg / (m s sqrt(K))
SUTHERLAND_C2 = 110.4  # K

TAG_CODES = {"slip-wall": 1, "no-slip-adiabatic": 2, "farfield": 3, "dirichlet-mms": 4}
WALL_TAGS = ("slip-wall", "no-slip-adiabatic")


class AdmissibilityError(ArithmeticError):
    """Negative density or pressure encountered."""

    def __init__(self, msg, element=None):
        super().__init__(msg if element is None else f"{msg} (element {element})")
        self.element = element


class ConfigError(ValueError):
    pass


def sutherland_viscosity(T, c1: float = SUTHERLAND_C1, c2: float = SUTHERLAND_C2):
    """Dimensional Sutherland viscosity mu = c1 T^1.5 / (T + c2)."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("temperature must be positive")
    mu = c1 * T**1.5 / (T + c2)
    return float(mu) if mu.ndim == 0 else mu


def reference_value(gamma: float, mach: float, p_inf: float, chord: float = 1.0) -> float:
    """C_inf = 1/2 gamma Ma^2 p_inf l."""
    return 0.5 * gamma * mach**2 * p_inf * chord


# ---------------------------------------------------------------------------
# Scalar convection-diffusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarModel:
    """Linear convection-diffusion: div(b w - nu grad w) = s."""

    b: tuple = (1.0, 0.0)
    nu: float = 0.0
    m: int = 1
    name: str = "scalar"

    @property
    def viscous(self) -> bool:
        return self.nu > 0

    def convective_flux(self, w):
        return jnp.outer(w, jnp.asarray(self.b, dtype=float))

    def viscous_flux(self, w, q):
        return self.nu * q

    def max_wave_speed(self, w, n):
        return jnp.abs(jnp.dot(jnp.asarray(self.b, dtype=float), n)) + 0.0 * w[0]

    def diffusivity(self, w):
        return self.nu + 0.0 * w[0]

    def eigensystem(self, w, n):
        bn = jnp.dot(jnp.asarray(self.b, dtype=float), n)
        one = jnp.ones((1, 1))
        return one, jnp.reshape(bn, (1,)), one

    def boundary_state(self, code, w, n, wext):
        bn = jnp.dot(jnp.asarray(self.b, dtype=float), n)
        upwind = jnp.where(bn < 0, wext, w)
        return jnp.where(code == TAG_CODES["dirichlet-mms"], upwind, w)

    def viscous_boundary_state(self, code, w, q, n, wext):
        wb = jnp.where(code == TAG_CODES["dirichlet-mms"], wext, w)
        return wb, q

    def density(self, w):
        return w[0]

    def check_states(self, W):
        return None


# ---------------------------------------------------------------------------
# Euler / Navier-Stokes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GasModel:
    gamma: float = 1.4
    prandtl: float = 0.72
    mach: float = 0.5
    aoa_deg: float = 0.0
    reynolds: float = math.inf
    t_ref: float = 288.15  # dimensional free-stream temperature for Sutherland

    def __post_init__(self):
        if self.gamma <= 1 or self.prandtl <= 0:
            raise ConfigError("require gamma > 1 and Pr > 0")

    @property
    def p_inf(self) -> float:
        return 1.0 / self.gamma

    @property
    def gas_constant(self) -> float:
        return 1.0 / self.gamma

    @property
    def cv(self) -> float:
        return self.gas_constant / (self.gamma - 1.0)

    @property
    def mu_inf(self) -> float:
        return self.mach / self.reynolds

    def freestream(self) -> np.ndarray:
        a = math.radians(self.aoa_deg)
        u, v = self.mach * math.cos(a), self.mach * math.sin(a)
        E = self.p_inf / (self.gamma - 1.0) + 0.5 * (u * u + v * v)
        return np.array([1.0, u, v, E])

    def c_inf(self, chord: float = 1.0) -> float:
        return reference_value(self.gamma, self.mach, self.p_inf, chord)


@dataclass(frozen=True)
class EulerModel:
    gas: GasModel = field(default_factory=GasModel)
    m: int = 4
    name: str = "euler"

    @property
    def viscous(self) -> bool:
        return False

    @property
    def gamma(self):
        return self.gas.gamma

    def pressure(self, w):
        return (self.gamma - 1.0) * (w[3] - 0.5 * (w[1] ** 2 + w[2] ** 2) / w[0])

    def temperature(self, w):
        return self.pressure(w) / ((self.gamma - 1.0) * self.gas.cv * w[0])

    def sound_speed(self, w):
        return jnp.sqrt(self.gamma * self.pressure(w) / w[0])

    def density(self, w):
        return w[0]

    def convective_flux(self, w):
        rho, mx, my, E = w[0], w[1], w[2], w[3]
        u, v = mx / rho, my / rho
        p = self.pressure(w)
        return jnp.stack([
            jnp.stack([mx, my]),
            jnp.stack([mx * u + p, mx * v]),
            jnp.stack([my * u, my * v + p]),
            jnp.stack([u * (E + p), v * (E + p)]),
        ])

    def max_wave_speed(self, w, n):
        vn = (w[1] * n[0] + w[2] * n[1]) / w[0]
        return jnp.abs(vn) + self.sound_speed(w)

    def diffusivity(self, w):
        return 0.0 * w[0]

    def eigensystem(self, w, n):
        """Right eigenvectors Q, eigenvalues and Q^-1 of d(f_c . n)/dw."""
        rho = w[0]
        u, v = w[1] / rho, w[2] / rho
        c = self.sound_speed(w)
        H = (w[3] + self.pressure(w)) / rho
        nx, ny = n[0], n[1]
        vn = u * nx + v * ny
        vt = -u * ny + v * nx
        q2 = 0.5 * (u * u + v * v)
        Q = jnp.array([
            [1.0, 0.0, 1.0, 1.0],
            [u, -ny, u + c * nx, u - c * nx],
            [v, nx, v + c * ny, v - c * ny],
            [q2, vt, H + c * vn, H - c * vn],
        ])
        lam = jnp.stack([vn, vn, vn + c, vn - c])
        g1 = self.gamma - 1.0
        b1 = g1 / (c * c)
        Qinv = jnp.array([
            [1.0 - b1 * q2, b1 * u, b1 * v, -b1],
            [-vt, -ny, nx, 0.0],
            [0.5 * (b1 * q2 - vn / c), 0.5 * (nx / c - b1 * u), 0.5 * (ny / c - b1 * v), 0.5 * b1],
            [0.5 * (b1 * q2 + vn / c), -0.5 * (nx / c + b1 * u), -0.5 * (ny / c + b1 * v), 0.5 * b1],
        ])
        return Q, lam, Qinv

    def characteristic_state(self, w, n, wext):
        Q, lam, Qinv = self.eigensystem(w, n)
        outgoing = lam >= 0
        wc = Qinv @ w
        wc_ext = Qinv @ wext
        return Q @ jnp.where(outgoing, wc, wc_ext)

    def boundary_state(self, code, w, n, wext):
        mn = w[1] * n[0] + w[2] * n[1]
        slip = jnp.stack([w[0], w[1] - mn * n[0], w[2] - mn * n[1], w[3]])
        noslip = jnp.stack([w[0], 0.0 * w[1], 0.0 * w[2], w[3]])
        char = self.characteristic_state(w, n, wext)
        return jnp.where(code == 1, slip, jnp.where(code == 2, noslip, char))

    def viscous_boundary_state(self, code, w, q, n, wext):
        return self.boundary_state(code, w, n, wext), q

    def check_states(self, W):
        """Return a mask of inadmissible points for an array of states (..., m)."""
        W = np.asarray(W)
        rho = W[..., 0]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            p = (self.gamma - 1.0) * (W[..., 3] - 0.5 * (W[..., 1] ** 2 + W[..., 2] ** 2) / rho)
        return ~((rho > 0) & (p > 0) & np.isfinite(p))


@dataclass(frozen=True)
class NavierStokesModel(EulerModel):
    name: str = "navier-stokes"

    @property
    def viscous(self) -> bool:
        return True

    def viscosity(self, w):
        T = self.temperature(w)
        s = SUTHERLAND_C2 / self.gas.t_ref
        return self.gas.mu_inf * T**1.5 * (1.0 + s) / (T + s)

    def conductivity(self, w):
        cp = self.gamma * self.gas.cv
        return self.viscosity(w) * cp / self.gas.prandtl

    def diffusivity(self, w):
        return self.viscosity(w) / w[0] * jnp.maximum(1.0, self.gamma / self.gas.prandtl)

    def primitive_gradients(self, w, q):
        """Velocity gradient grad_v[i, d] = d v_i / d x_d and temperature gradient."""
        rho = w[0]
        v = w[1:3] / rho
        grad_v = (q[1:3] - jnp.outer(v, q[0])) / rho
        g1 = self.gamma - 1.0
        grad_p = g1 * (q[3] - v @ q[1:3] + 0.5 * jnp.dot(v, v) * q[0])
        p = self.pressure(w)
        R = self.gas.gas_constant
        grad_T = (grad_p / rho - p * q[0] / rho**2) / R
        return grad_v, grad_T

    def stress(self, w, q):
        grad_v, _ = self.primitive_gradients(w, q)
        mu = self.viscosity(w)
        div = jnp.trace(grad_v)
        return mu * (grad_v + grad_v.T - (2.0 / 3.0) * div * jnp.eye(2))

    def viscous_flux(self, w, q):
        grad_v, grad_T = self.primitive_gradients(w, q)
        mu = self.viscosity(w)
        div = jnp.trace(grad_v)
        tau = mu * (grad_v + grad_v.T - (2.0 / 3.0) * div * jnp.eye(2))
        v = w[1:3] / w[0]
        energy = tau @ v + self.conductivity(w) * grad_T
        return jnp.stack([jnp.zeros(2), tau[0], tau[1], energy])

    def viscous_boundary_state(self, code, w, q, n, wext):
        wb = self.boundary_state(code, w, n, wext)
        # adiabatic wall: remove the normal temperature gradient through the energy gradient
        _, grad_T = self.primitive_gradients(wb, q)
        dT_dE = (self.gamma - 1.0) / (wb[0] * self.gas.gas_constant)
        corr = jnp.dot(grad_T, n) / dT_dE
        q_adiabatic = q.at[3].add(-corr * n)
        qb = jnp.where(code == 2, q_adiabatic, q)
        return wb, qb



def make_model(name: str, **kw):
    if name == "scalar":
        return ScalarModel(b=tuple(kw.get("b", (1.0, 0.0))), nu=float(kw.get("nu", 0.0)))
    gas = GasModel(gamma=kw.get("gamma", 1.4), prandtl=kw.get("prandtl", 0.72),
                   mach=kw.get("mach", 0.5), aoa_deg=kw.get("aoa", 0.0),
                   reynolds=kw.get("reynolds", math.inf), t_ref=kw.get("t_ref", 288.15))
    if name == "euler":
        return EulerModel(gas)
    if name in ("navier-stokes", "ns"):
        if not math.isfinite(gas.reynolds):
            raise ConfigError("navier-stokes requires a finite Reynolds number")
        return NavierStokesModel(gas)
    raise ConfigError(f"unknown model {name!r}")


# ---------------------------------------------------------------------------
# Convenience wrappers matching the point-wise operations
# ---------------------------------------------------------------------------

def convective_flux(model, w):
    return np.asarray(model.convective_flux(jnp.asarray(w, dtype=float)))


def viscous_flux(model, w, q):
    if not hasattr(model, "viscous_flux") or not model.viscous:
        return np.zeros((model.m, 2))
    return np.asarray(model.viscous_flux(jnp.asarray(w, dtype=float), jnp.asarray(q, dtype=float)))


def boundary_state(model, tag: str, w, n, w_far=None):
    if tag not in TAG_CODES:
        raise ConfigError(f"unknown boundary tag {tag!r}")
    w = jnp.asarray(w, dtype=float)
    wext = w if w_far is None else jnp.asarray(w_far, dtype=float)
    return np.asarray(model.boundary_state(TAG_CODES[tag], w, jnp.asarray(n, dtype=float), wext))


def normal_jacobian_eigensystem(model, w, n):
    w = np.asarray(w, dtype=float)
    if hasattr(model, "check_states") and model.check_states(w) is not None and np.any(model.check_states(w)):
        raise AdmissibilityError("non-admissible state")
    Q, lam, Qinv = model.eigensystem(jnp.asarray(w), jnp.asarray(n, dtype=float))
    return np.asarray(Q), np.asarray(lam), np.asarray(Qinv)


# ---------------------------------------------------------------------------
# Output functionals
# ---------------------------------------------------------------------------

FUNCTIONAL_KINDS = ("pressure-drag", "pressure-lift", "viscous-drag", "viscous-lift", "mms-volume")


@dataclass(frozen=True)
class TargetFunctional:
    """Boundary force coefficient or weighted volume integral.

    For force coefficients the weight on wall edges is psi = direction / C_inf
    with direction (cos a, sin a) for drag and (-sin a, cos a) for lift.
    ``volume_weight`` is a callable x -> (npts, m) used by ``mms-volume``.
    """

    kind: str
    aoa_deg: float = 0.0
    c_inf: float = 1.0
    volume_weight: object = None
    wall_tags: tuple = WALL_TAGS

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ConfigError(f"unknown functional {self.kind!r}")

    @property
    def viscous(self) -> bool:
        return self.kind.startswith("viscous")

    @property
    def is_boundary(self) -> bool:
        return self.kind != "mms-volume"

    def psi(self) -> np.ndarray:
        a = math.radians(self.aoa_deg)
        if self.kind.endswith("drag"):
            d = (math.cos(a), math.sin(a))
        elif self.kind.endswith("lift"):
            d = (-math.sin(a), math.cos(a))
        else:
            return np.zeros(2)
        return np.asarray(d) / self.c_inf

    def check(self, model) -> None:
        if self.viscous and not model.viscous:
            raise ConfigError(f"{self.kind} requires a viscous model")
        if self.is_boundary and model.m != 4:
            raise ConfigError(f"{self.kind} requires a compressible-flow model")

    def boundary_integrand(self, model, wb, qb, n, psi):
        """psi . (p n) or psi . (p n - tau n) at one point."""
        force = model.pressure(wb) * n
        if self.viscous:
            force = force - model.stress(wb, qb) @ n
        return jnp.dot(psi, force)


@dataclass
class Problem:
    """Model plus the data needed to pose a boundary-value problem.

    ``exact`` supplies Dirichlet data (and the reference solution when known);
    ``freestream`` is the far-field state. Both callables map points (npts, 2)
    to states (npts, m).
    """

    model: object
    source: object = None
    exact: object = None
    freestream: object = None
    functional: TargetFunctional | None = None

    def external_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        m = self.model.m
        if self.exact is not None:
            return np.asarray(self.exact(x), dtype=float).reshape(x.shape[0], m)
        if self.freestream is not None:
            return np.broadcast_to(np.asarray(self.freestream, dtype=float), (x.shape[0], m)).copy()
        if hasattr(self.model, "gas"):
            return np.broadcast_to(self.model.gas.freestream(), (x.shape[0], m)).copy()
        return np.zeros((x.shape[0], m))

    def source_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.source is None:
            return np.zeros((x.shape[0], self.model.m))
        return np.asarray(self.source(x), dtype=float).reshape(x.shape[0], self.model.m)


@dataclass(frozen=True)
class Stabilization:
    """Interface penalty and artificial-viscosity settings.

    ``alpha=None`` selects the per-point default: spectral radius of the normal
    flux Jacobian at the trace plus a viscous estimate (nu + eps) / h_e.
    """

    alpha: float | None = None
    shock_capturing: bool = False
    eps0: float = 0.2
    beta: float = 0.0
    frozen_viscosity: bool = False
    eta_br2: float = 3.0

    def __post_init__(self):
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.eps0 < 0:
            raise ConfigError("eps0 must be non-negative")

    def key(self):
        return (self.alpha, self.shock_capturing and self.eps0 > 0, self.eps0, self.beta,
                self.frozen_viscosity, self.eta_br2)
