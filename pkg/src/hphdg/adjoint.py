"""Discrete adjoint in an enriched space and goal-oriented error indicators.

The adjoint z solves J(x)^T z = dJ/dx at the primal state prolonged to
degrees p_K + 1. For HDG the system is condensed onto the traces with the
transposed local solves; for DG the transposed global matrix is solved
directly. The error estimate is eta = -N(x; z), i.e. minus the adjoint
weighted residual of the prolonged primal state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .krylov import LinearSolverConfig, solve_linear

INDICATORS = ("local-only", "full")


@dataclass
class AdjointSolution:
    disc: object          # discretization at the enriched degrees
    x: np.ndarray         # primal state prolonged to the enriched space
    z: np.ndarray         # adjoint coefficients in the same layout
    iterations: int
    relative_residual: float

    @property
    def W(self):
        return self.disc.W_list(self.z)


@dataclass
class ErrorEstimate:
    eta: float
    eta_K: np.ndarray
    e_ref: float | None = None

    def subset(self, elements) -> float:
        """eta_M with eta_M^2 = sum of eta_K^2 over ``elements``."""
        return float(np.sqrt(np.sum(self.eta_K[np.asarray(elements, dtype=int)] ** 2)))

    def effectivity(self) -> float:
        if self.e_ref is None:
            raise ValueError("no reference error available")
        return self.eta / self.e_ref


def enriched_discretization(disc, by: int = 1):
    """Same mesh and method with every element degree raised by ``by``."""
    if by < 1:
        raise ValueError("the adjoint space must be richer than the primal one "
                         "(with equal spaces the estimate vanishes identically)")
    return type(disc)(disc.mesh, disc.problem, disc.degrees.enriched(by), disc.stab,
                      scale_degrees=disc.scale_degrees)


def solve_adjoint(disc, x, config: LinearSolverConfig | None = None, enrichment: int = 1,
                  enriched=None) -> AdjointSolution:
    """Adjoint of the target functional at the primal state ``x`` of ``disc``."""
    config = config or LinearSolverConfig(rtol=1e-10)
    fine = enriched if enriched is not None else enriched_discretization(disc, enrichment)
    xf = disc.transfer_degrees(x, fine)
    lin = fine.linearize(xf)
    g = fine.functional_gradient(xf)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return AdjointSolution(fine, xf, np.zeros_like(g), 0, 0.0)
    if fine.method == "hdg":
        E = lin.transpose_rhs(g)
        if fine.n_lambda:
            res = solve_linear(lin.condense_transpose(), E, config, block_ptr=fine.lam_offset,
                               block_key=fine.block_key(transpose=True))
            zlam, its = res.x, res.iterations
        else:
            zlam, its = np.zeros(0), 0
        z = lin.transpose_reconstruct(g, zlam)
    else:
        z, its = lin.solve_transpose(g, config)
    rel = float(np.linalg.norm(lin.full_matrix().T @ z - g)) / gnorm
    return AdjointSolution(fine, xf, z, its, rel)


def estimate_error(adjoint: AdjointSolution, indicator: str = "local-only",
                   J_ref: float | None = None, J_h: float | None = None) -> ErrorEstimate:
    """Global estimate and per-element indicators.

    ``local-only`` weights each element's own residual rows with its local
    adjoint coefficients and ignores the trace adjoint. ``full`` also adds the
    trace contributions, split evenly between the two elements of an edge.
    The global eta always uses the complete adjoint.
    """
    if indicator not in INDICATORS:
        raise ValueError(f"indicator must be one of {INDICATORS}")
    fine, xf, z = adjoint.disc, adjoint.x, adjoint.z
    r = fine.residual(xf)
    prod = z * r
    eta = -float(np.sum(prod))
    T = fine.mesh.n_elements
    owner = np.repeat(np.arange(T), fine.local_size)
    local = np.bincount(owner, weights=prod[: fine.n_local], minlength=T)
    if indicator == "full" and fine.method == "hdg" and fine.n_lambda:
        ie = fine.mesh.interior_edges
        per_edge = np.add.reduceat(prod[fine.n_local:], fine.lam_offset[:-1])
        np.add.at(local, ie[:, 2], 0.5 * per_edge)
        np.add.at(local, ie[:, 3], 0.5 * per_edge)
    e_ref = None
    if J_ref is not None and J_h is not None:
        e_ref = float(J_ref - J_h)
    return ErrorEstimate(eta, np.abs(local), e_ref)
