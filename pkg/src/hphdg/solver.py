"""Pseudo-transient Newton continuation with local time stepping."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .krylov import LinearSolverConfig, LinearSolverError
from .physics import AdmissibilityError


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class ContinuationConfig:
    """CFL schedule and Newton stopping parameters.

    ``switch_tol`` is relative to the initial residual; once the residual
    drops below it the time term is removed (pure Newton).
    """

    c0: float = 1e6
    c1: float = 1e3
    n0: int = 4
    newton_tol: float = 1e-10
    newton_rtol: float = 0.0
    max_newton: int = 60
    switch_tol: float = 1e-4
    pure_newton: bool = False
    max_cfl_cuts: int = 12

    def __post_init__(self):
        if self.c0 <= 0 or self.c1 <= 0 or self.n0 < 1:
            raise ValueError("require c0 > 0, c1 > 0 and n0 >= 1")


def cfl_schedule(n: int, history, config: ContinuationConfig = ContinuationConfig(),
                 previous: float | None = None) -> float:
    """CFL number of iteration ``n`` (1-based).

    ``history[k]`` is the residual norm at iteration k (history[0] initial).
    Up to n0 a smooth cubic ramp reaches c0; afterwards the CFL grows with the
    logarithmic residual decrease and stays put when the residual stagnates.
    """
    if n < 1:
        raise ValueError("iteration index starts at 1")
    n0 = config.n0
    if n <= n0:
        t = n / n0
        return config.c0 * (3 * t * t - 2 * t**3)
    if previous is None:
        previous = cfl_schedule(n - 1, history, config)
    ratio = history[n - 1] / history[n]
    return previous * (1.0 + config.c1 * max(0.0, math.log(ratio)))


def spectral_radii(model, w_mean, areas, perimeters):
    """Convective and viscous eigenvalue estimates (lambda_c, lambda_v) per element."""
    w_mean = np.asarray(w_mean, dtype=float)
    areas = np.asarray(areas, dtype=float)
    perimeters = np.asarray(perimeters, dtype=float)
    if model.m == 1:
        lam_c = np.hypot(*model.b) * perimeters
        lam_v = model.nu * perimeters**2 / areas
        return lam_c, lam_v
    g = model.gamma
    rho = np.maximum(w_mean[:, 0], 1e-12)
    u, v = w_mean[:, 1] / rho, w_mean[:, 2] / rho
    p = (g - 1.0) * (w_mean[:, 3] - 0.5 * rho * (u * u + v * v))
    c = np.sqrt(np.maximum(g * p / rho, 0.0))
    lam_c = (np.hypot(u, v) + c) * perimeters
    if not model.viscous:
        return lam_c, np.zeros_like(lam_c)
    T = np.maximum(p, 1e-12) / ((g - 1.0) * model.gas.cv * rho)
    s = 110.4 / model.gas.t_ref
    mu = model.gas.mu_inf * T**1.5 * (1.0 + s) / (T + s)
    nu = mu / rho * max(1.0, g / model.gas.prandtl)
    return lam_c, nu * perimeters**2 / areas


def local_timestep(areas, lam_c, lam_v, cfl):
    """dt_K = CFL |K| / (lambda_c + 4 lambda_v)."""
    if cfl <= 0:
        raise ValueError("CFL must be positive")
    denom = np.maximum(np.asarray(lam_c) + 4.0 * np.asarray(lam_v), 1e-300)
    return cfl * np.asarray(areas, dtype=float) / denom


@dataclass
class SolveResult:
    x: np.ndarray
    converged: bool
    history: list = field(default_factory=list)
    message: str = ""
    timings: dict = field(default_factory=lambda: {"assembly": 0.0, "linear": 0.0})

    @property
    def iterations(self) -> int:
        return len(self.history) - 1 if self.history else 0

    @property
    def residuals(self):
        return [h["residual"] for h in self.history]


def nonlinear_solve(disc, x0=None, config: ContinuationConfig = ContinuationConfig(),
                    linear: LinearSolverConfig = LinearSolverConfig(), raise_on_fail: bool = False,
                    log=None) -> SolveResult:
    """Drive ``disc.residual`` to zero by pseudo-transient Newton iterations.

    History rows hold iter, residual, cfl, linear_iters and wall_time_s; row 0
    is the initial state. When an update produces an inadmissible state the
    step is rejected and the CFL number is reduced tenfold.
    """
    t0 = time.perf_counter()
    timings = {"assembly": 0.0, "linear": 0.0}

    def assemble(state):
        ta = time.perf_counter()
        try:
            return disc.linearize(state)
        finally:
            timings["assembly"] += time.perf_counter() - ta

    x = disc.initial_state() if x0 is None else np.array(x0, dtype=float)
    areas = disc.mesh.element_areas()
    perims = disc.mesh.perimeters()
    lin = assemble(x)
    r0 = float(np.linalg.norm(lin.r))
    history = [dict(iter=0, residual=r0, cfl=0.0, linear_iters=0, wall_time_s=time.perf_counter() - t0)]
    norms = [r0]
    tol = max(config.newton_tol, config.newton_rtol * r0)
    switch = config.switch_tol * r0
    cfl = base = None
    scale = 1.0
    cuts = 0
    n = 0
    while True:
        rnorm = norms[-1]
        if not np.isfinite(rnorm):
            return _finish(SolveResult(x, False, history, "residual is not finite", timings),
                           raise_on_fail)
        if rnorm <= tol:
            return SolveResult(x, True, history, "converged", timings)
        if n >= config.max_newton:
            return _finish(SolveResult(x, False, history, f"no convergence in {n} Newton iterations",
                                       timings), raise_on_fail)
        n += 1
        pure = config.pure_newton or rnorm < switch
        if pure:
            cfl = base = math.inf
        else:
            base = cfl_schedule(n, [math.nan] + norms, config, None if base in (None, math.inf) else base)
            cfl = base * scale
            lam_c, lam_v = spectral_radii(disc.model, disc.mean_states(x), areas, perims)
            lin.add_time_term(local_timestep(areas, lam_c, lam_v, cfl))
        tl = time.perf_counter()
        try:
            dx, lin_iters = lin.solve(linear)
        except (LinearSolverError, np.linalg.LinAlgError) as exc:
            return _finish(SolveResult(x, False, history, f"linear solver failure: {exc}", timings),
                           raise_on_fail)
        finally:
            timings["linear"] += time.perf_counter() - tl
        x_new = x + dx
        try:
            lin_new = assemble(x_new)
            r_new = float(np.linalg.norm(lin_new.r))
            ok = np.isfinite(r_new)
        except AdmissibilityError:
            ok = False
        if not ok:
            cuts += 1
            if cuts > config.max_cfl_cuts:
                return _finish(SolveResult(x, False, history, "step rejected too often", timings),
                               raise_on_fail)
            scale *= 0.1 if not pure else 1.0
            if pure:
                # fall back to pseudo-time stepping with a reduced CFL
                config = _with(config, switch_tol=0.0, pure_newton=False)
                scale = 1e-3
            base = None
            n -= 1
            lin = assemble(x)
            continue
        if r_new < rnorm:
            # a successful step undoes one earlier cut
            scale = min(1.0, 10.0 * scale)
        x, lin = x_new, lin_new
        cuts = 0
        norms.append(r_new)
        history.append(dict(iter=len(history), residual=r_new, cfl=cfl, linear_iters=lin_iters,
                            wall_time_s=time.perf_counter() - t0))
        if log is not None:
            log(f"newton {len(history) - 1}: |N| = {r_new:.3e}  cfl = {cfl:.3g}  gmres = {lin_iters}")


def _with(config, **kw):
    d = {k: getattr(config, k) for k in config.__dataclass_fields__}
    d.update(kw)
    return ContinuationConfig(**d)


def _finish(result: SolveResult, raise_on_fail: bool) -> SolveResult:
    if raise_on_fail:
        raise NonConvergenceError(result.message, result)
    return result
