"""Polynomial spaces on the reference triangle and reference interval.

The reference triangle has vertices (-1,-1), (1,-1), (-1,1) (area 2). Element
modes are the orthonormal Dubiner basis ordered by total degree, so a degree-p
expansion is the leading ``n(p) = (p+1)(p+2)/2`` coefficients of any
higher-degree expansion. Edge modes are orthonormal Legendre polynomials on
[-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import eval_jacobi, gammaln, roots_jacobi

REF_VERTICES = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
REF_AREA = 2.0


def n_modes(p: int) -> int:
    """Number of element modes of total degree <= p."""
    return (p + 1) * (p + 2) // 2


def mode_degrees(p: int) -> list[tuple[int, int]]:
    """(i, j) index pairs of the element modes, grouped by total degree i + j."""
    return [(k - j, j) for k in range(p + 1) for j in range(k + 1)]


def _jacobi_normalized(n, alpha, beta, x):
    x = np.asarray(x, dtype=float)
    log_gamma = ((alpha + beta + 1) * np.log(2.0) - np.log(2 * n + alpha + beta + 1)
                 + gammaln(n + alpha + 1) + gammaln(n + beta + 1)
                 - gammaln(n + alpha + beta + 1) - gammaln(n + 1))
    return eval_jacobi(n, alpha, beta, x) / np.exp(0.5 * log_gamma)


def _jacobi_normalized_grad(n, alpha, beta, x):
    if n == 0:
        return np.zeros_like(np.asarray(x, dtype=float))
    return (np.sqrt(n * (n + alpha + beta + 1))
            * _jacobi_normalized(n - 1, alpha + 1, beta + 1, x))


def _collapse(points):
    r, s = points[..., 0], points[..., 1]
    denom = 1.0 - s
    safe = np.abs(denom) > 1e-14
    a = np.where(safe, 2.0 * (1.0 + r) / np.where(safe, denom, 1.0) - 1.0, -1.0)
    return a, s


def evaluate_basis(p: int, points) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal element modes and their reference gradients.

    Parameters
    ----------
    p : int
        Polynomial degree, ``p >= 0``.
    points : array_like, shape (npts, 2)
        Reference coordinates.

    Returns
    -------
    values : ndarray, shape (n(p), npts)
    grads : ndarray, shape (n(p), npts, 2)
    """
    if p < 0:
        raise ValueError("degree must be non-negative")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a, b = _collapse(pts)
    nm = n_modes(p)
    values = np.empty((nm, len(pts)))
    grads = np.empty((nm, len(pts), 2))
    half = 0.5 * (1.0 - b)
    for idx, (i, j) in enumerate(mode_degrees(p)):
        fa = _jacobi_normalized(i, 0.0, 0.0, a)
        dfa = _jacobi_normalized_grad(i, 0.0, 0.0, a)
        gb = _jacobi_normalized(j, 2.0 * i + 1.0, 0.0, b)
        dgb = _jacobi_normalized_grad(j, 2.0 * i + 1.0, 0.0, b)
        values[idx] = np.sqrt(2.0) * fa * gb * (1.0 - b) ** i

        dr = dfa * gb
        if i > 0:
            dr = dr * half ** (i - 1)
        ds = dfa * (gb * 0.5 * (1.0 + a))
        if i > 0:
            ds = ds * half ** (i - 1)
        tmp = dgb * half ** i
        if i > 0:
            tmp = tmp - 0.5 * i * gb * half ** (i - 1)
        ds = ds + fa * tmp
        scale = 2.0 ** (i + 0.5)
        grads[idx, :, 0] = dr * scale
        grads[idx, :, 1] = ds * scale
    return values, grads


def evaluate_edge_basis(p: int, s) -> np.ndarray:
    """Orthonormal Legendre modes on [-1, 1], shape (p+1, npts)."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    return np.array([np.sqrt((2 * k + 1) / 2.0) * eval_jacobi(k, 0.0, 0.0, s)
                     for k in range(p + 1)]).reshape(p + 1, len(s))


@dataclass(frozen=True)
class Quadrature:
    """Quadrature rule: ``points`` (npts, dim) and positive ``weights``."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def triangle_quadrature(degree: int) -> Quadrature:
    """Collapsed Gauss rule on the reference triangle, exact to total ``degree``."""
    n = max(1, (degree + 2) // 2)
    xa, wa = np.polynomial.legendre.leggauss(n)
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    A, B = np.meshgrid(xa, xb, indexing="ij")
    W = np.outer(wa, wb) * 0.5
    r = 0.5 * (1.0 + A) * (1.0 - B) - 1.0
    pts = np.column_stack([r.ravel(), B.ravel()])
    pts.setflags(write=False)
    w = W.ravel()
    w.setflags(write=False)
    return Quadrature(pts, w, degree)


@lru_cache(maxsize=None)
def line_quadrature(degree: int) -> Quadrature:
    """Gauss-Legendre rule on [-1, 1], exact to ``degree``."""
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    x = x.reshape(-1, 1)
    x.setflags(write=False)
    w.setflags(write=False)
    return Quadrature(x, w, degree)


def quadrature_degree(p: int, geo_degree: int = 1) -> int:
    """Exactness used for element and edge integrals of degree-p fields."""
    return 2 * p + 1 + 2 * (geo_degree - 1)


def face_points(face: int, s) -> np.ndarray:
    """Map edge parameter s in [-1, 1] onto local face ``face`` of the reference triangle.

    Face f runs from reference vertex f to vertex (f+1) % 3.
    """
    s = np.asarray(s, dtype=float).reshape(-1)
    v0 = REF_VERTICES[face]
    v1 = REF_VERTICES[(face + 1) % 3]
    return 0.5 * np.outer(1.0 - s, v0) + 0.5 * np.outer(1.0 + s, v1)


def face_tangent(face: int) -> np.ndarray:
    """d(xi)/ds along reference face ``face``."""
    return 0.5 * (REF_VERTICES[(face + 1) % 3] - REF_VERTICES[face])


def project_degree(coeffs, p: int, q: int) -> np.ndarray:
    """Project a degree-p expansion (last axis) onto degree q.

    Raising the degree pads with zeros; lowering it truncates, which is the L2
    projection for the orthonormal hierarchical basis.
    """
    c = np.asarray(coeffs)
    if c.shape[-1] != n_modes(p):
        raise ValueError(f"expected {n_modes(p)} coefficients for p={p}, got {c.shape[-1]}")
    nq = n_modes(q)
    if q <= p:
        return c[..., :nq].copy()
    out = np.zeros(c.shape[:-1] + (nq,), dtype=c.dtype)
    out[..., : c.shape[-1]] = c
    return out


def project_edge_degree(coeffs, p: int, q: int) -> np.ndarray:
    c = np.asarray(coeffs)
    if q <= p:
        return c[..., : q + 1].copy()
    out = np.zeros(c.shape[:-1] + (q + 1,), dtype=c.dtype)
    out[..., : p + 1] = c
    return out


class DegreeMap:
    """Element degrees p_K and the derived interior-edge degrees p_e = max(p_K-, p_K+)."""

    def __init__(self, mesh, element_degrees, p_min: int = 0, p_max: int | None = None):
        pk = np.asarray(element_degrees, dtype=int)
        if np.isscalar(element_degrees) or pk.ndim == 0:
            pk = np.full(mesh.n_elements, int(pk))
        if pk.shape != (mesh.n_elements,):
            raise ValueError("one degree per element required")
        if pk.min() < p_min or (p_max is not None and pk.max() > p_max):
            raise ValueError(f"degrees outside [{p_min}, {p_max}]")
        self.mesh = mesh
        self.p_K = pk
        self.p_min = p_min
        self.p_max = p_max
        ie = mesh.interior_edges
        self.p_e = np.maximum(pk[ie[:, 2]], pk[ie[:, 3]]) if len(ie) else np.zeros(0, int)

    def enriched(self, by: int = 1) -> "DegreeMap":
        p_max = None if self.p_max is None else self.p_max + by
        return DegreeMap(self.mesh, self.p_K + by, self.p_min, p_max)

    def ndof_w(self, m: int) -> int:
        return int(m * sum(n_modes(int(p)) for p in self.p_K))

    def ndof_lambda(self, m: int) -> int:
        return int(m * np.sum(self.p_e + 1))

    def check(self) -> None:
        ie = self.mesh.interior_edges
        expected = np.maximum(self.p_K[ie[:, 2]], self.p_K[ie[:, 3]])
        if not np.array_equal(expected, self.p_e):
            raise AssertionError("edge degrees violate the max rule")
