"""Doerfler marking, smoothness sensing and hp-adaptation with solution transfer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import barycentric, refine
from .space import DegreeMap, evaluate_basis, n_modes, project_degree, triangle_quadrature

KEEP, H_REFINE, P_ENRICH = 0, 1, 2
VERDICT_NAMES = {KEEP: "keep", H_REFINE: "h-refine", P_ENRICH: "p-enrich"}
MODES = ("hp", "h", "p")
SENSOR_COMPONENTS = ("density", "max")


@dataclass(frozen=True)
class AdaptationConfig:
    """theta: Doerfler fraction; eps_s: smoothness threshold; p_max: degree cap.

    ``mode`` restricts the verdicts ("h" for pure mesh refinement, "p" for
    pure enrichment); ``sensor`` picks the density component or the maximum
    over all components.
    """

    theta: float = 0.05
    eps_s: float = 1e-6
    p_max: int = 5
    max_cycles: int = 5
    mode: str = "hp"
    sensor: str = "density"

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.eps_s <= 0.0:
            raise ValueError("eps_s must be positive")
        if self.p_max < 0 or self.max_cycles < 0:
            raise ValueError("p_max and max_cycles must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.sensor not in SENSOR_COMPONENTS:
            raise ValueError(f"sensor must be one of {SENSOR_COMPONENTS}")


@dataclass
class AdaptationPlan:
    verdict: np.ndarray      # (T,) KEEP / H_REFINE / P_ENRICH
    degrees: np.ndarray      # (T,) degrees after enrichment, before refinement

    @property
    def h_set(self) -> np.ndarray:
        return np.flatnonzero(self.verdict == H_REFINE)

    @property
    def p_set(self) -> np.ndarray:
        return np.flatnonzero(self.verdict == P_ENRICH)

    def summary(self) -> dict:
        counts = {name: int(np.sum(self.verdict == code)) for code, name in VERDICT_NAMES.items()}
        hist = {int(p): int(c) for p, c in zip(*np.unique(self.degrees, return_counts=True))}
        return {"counts": counts, "degree_histogram": hist}


def mark_dorfler(eta_K, theta: float) -> np.ndarray:
    """Smallest set M with eta_M >= (1 - theta) eta_total, largest indicators first.

    Ties in eta are broken by ascending element id. Returns the ids in
    marking order; an all-zero indicator vector gives the empty set.
    """
    eta = np.asarray(eta_K, dtype=float)
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise ValueError("indicators must be finite and non-negative")
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie in (0, 1)")
    sq = eta**2
    total = sq.sum()
    if total == 0.0:
        return np.zeros(0, dtype=int)
    order = np.lexsort((np.arange(len(eta)), -eta))
    cum = np.cumsum(sq[order])
    target = (1.0 - theta) ** 2 * total
    k = int(np.searchsorted(cum, target, side="left"))
    return order[: min(k + 1, len(eta))]


def smoothness_sensor(W, p: int, component: str | int = "density") -> float:
    """Energy fraction of the top-degree modes, (w - w*, w - w*) / (w, w).

    ``W`` holds the (m, n(p)) coefficients of one element in the orthonormal
    hierarchical basis, so w* (the projection to degree p - 1) is the
    truncation and both inner products reduce to sums of squares.
    """
    if p < 1:
        raise ValueError("the smoothness sensor needs p >= 1")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if W.shape[-1] != n_modes(p):
        raise ValueError(f"expected {n_modes(p)} modes for p={p}")
    top = np.sum(W[:, n_modes(p - 1):] ** 2, axis=1)
    full = np.sum(W**2, axis=1)
    ratio = np.divide(top, full, out=np.zeros_like(top), where=full > 0)
    if component == "density":
        return float(ratio[0])
    if component == "max":
        return float(ratio.max())
    return float(ratio[int(component)])


def smoothness_sensors(disc, x, component: str = "density") -> np.ndarray:
    """Sensor per element; degree-0 elements report 0 so they may be enriched."""
    out = np.zeros(disc.mesh.n_elements)
    for K, p in enumerate(disc.degrees.p_K):
        if p >= 1:
            out[K] = smoothness_sensor(disc.element_W(x, K), int(p), component)
    return out


def decide_hp(marked, sensors, degrees, config: AdaptationConfig = AdaptationConfig()) -> AdaptationPlan:
    """Verdict per element: smooth marked elements are enriched, the rest refined.

    Marked elements already at p_max are refined instead of stalling.
    """
    pk = np.asarray(degrees.p_K if isinstance(degrees, DegreeMap) else degrees, dtype=int)
    sensors = np.asarray(sensors, dtype=float)
    verdict = np.full(len(pk), KEEP, dtype=int)
    for K in np.asarray(marked, dtype=int):
        can_p = pk[K] < config.p_max
        if config.mode == "h":
            verdict[K] = H_REFINE
        elif config.mode == "p":
            verdict[K] = P_ENRICH if can_p else H_REFINE
        else:
            verdict[K] = P_ENRICH if (sensors[K] < config.eps_s and can_p) else H_REFINE
    return AdaptationPlan(verdict, pk + (verdict == P_ENRICH))


def apply_plan(disc, x, plan: AdaptationPlan):
    """Execute ``plan``; returns (new discretization, transferred state, transfer map)."""
    mesh = disc.mesh
    new_mesh, transfer = refine(mesh, plan.h_set)
    origins = transfer.origins(new_mesh.n_elements)
    p_new = np.array([max(int(plan.degrees[o]) for o in org) for org in origins], dtype=int)
    dm = disc.degrees
    p_max = None if dm.p_max is None else max(dm.p_max, int(p_new.max()))
    degrees = DegreeMap(new_mesh, p_new, dm.p_min, p_max)
    new = type(disc)(new_mesh, disc.problem, degrees, disc.stab)
    if new_mesh is mesh:
        return new, disc.transfer_degrees(x, new), transfer
    return new, transfer_solution(disc, x, new, origins), transfer


def _reference_coords(mesh, K, pts, iters: int = 8):
    """Reference coordinates of physical points ``pts`` in element K (Newton on the map)."""
    v = mesh.vertices[mesh.elements[K]]
    A = np.column_stack([v[1] - v[0], v[2] - v[0]])
    lam = np.linalg.solve(A, (pts - v[0]).T).T
    xi = -1.0 + 2.0 * lam
    if mesh.geo_degree[K] <= 1:
        return xi
    for _ in range(iters):
        xk, J = mesh.map_reference(xi, [K])
        res = xk[0] - pts
        step = np.linalg.solve(J[0], res[..., None])[..., 0]
        xi = xi - step
        if np.max(np.abs(step)) < 1e-13:
            break
    return xi


def _evaluate_old(old, x, K, pts):
    xi = _reference_coords(old.mesh, K, pts)
    phi, _ = evaluate_basis(int(old.degrees.p_K[K]), xi)
    return old.element_W(x, K) @ phi, barycentric(xi).min(axis=1)


def transfer_solution(old, x, new, origins) -> np.ndarray:
    """Initial guess on the adapted space.

    Elements that kept their geometry copy (and pad) their coefficients;
    refined elements receive the L2 projection of the old solution, located
    point by point among the elements they came from.
    """
    y = new.zeros()
    m_old, m_new = old.mesh, new.mesh
    for j, org in enumerate(origins):
        pj = int(new.degrees.p_K[j])
        if len(org) == 1 and np.array_equal(m_old.elements[org[0]], m_new.elements[j]) \
                and np.allclose(m_old.vertices[m_old.elements[org[0]]], m_new.vertices[m_new.elements[j]]):
            K = org[0]
            W = project_degree(old.element_W(x, K), int(old.degrees.p_K[K]), pj)
            new.set_element_W(y, j, W)
            continue
        curved = m_new.geo_degree[j] > 1
        q = triangle_quadrature(2 * pj + 2 + (4 if curved else 0))
        phi, _ = evaluate_basis(pj, q.points)
        pts, J = m_new.map_reference(q.points, [j])
        pts, J = pts[0], J[0]
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        vals = np.zeros((len(pts), new.m))
        best = np.full(len(pts), -np.inf)
        for K in org:
            v, inside = _evaluate_old(old, x, K, pts)
            take = inside > best
            vals[take] = v.T[take]
            best[take] = inside[take]
        wts = det * q.weights
        M = (phi * wts) @ phi.T
        rhs = (phi * wts) @ vals
        new.set_element_W(y, j, np.linalg.solve(M, rhs).T)
    new._complete_projection(y)
    return y
