"""Per-element quadrature data shared by the HDG and DG discretizations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .space import (evaluate_basis, evaluate_edge_basis, face_points, face_tangent,
                    line_quadrature, triangle_quadrature)


@dataclass
class GroupGeometry:
    """Quadrature data for a batch of elements of equal degree.

    Shapes use B elements, n modes, nq volume points and nf points per face.
    """

    elements: np.ndarray   # (B,)
    phi: np.ndarray        # (n, nq)
    gphi: np.ndarray       # (B, n, nq, 2) physical gradients
    vol_x: np.ndarray      # (B, nq, 2)
    vol_w: np.ndarray      # (B, nq) weights times Jacobian determinant
    face_s: np.ndarray     # (nf,) edge parameter of the face points
    face_phi: np.ndarray   # (3, n, nf)
    face_gphi: np.ndarray  # (B, 3, n, nf, 2)
    face_x: np.ndarray     # (B, 3, nf, 2)
    face_n: np.ndarray     # (B, 3, nf, 2) unit outward normals
    face_w: np.ndarray     # (B, 3, nf) weights times surface measure
    face_lw: np.ndarray    # (nf,) reference line weights

    @property
    def mass(self) -> np.ndarray:
        return np.einsum("iq,jq,bq->bij", self.phi, self.phi, self.vol_w)

    @property
    def areas(self) -> np.ndarray:
        return self.vol_w.sum(axis=1)


def _physical_grads(gref, J):
    # gref (n, nq, 2); J (B, nq, 2, 2) with J[..., i, j] = dx_i / dxi_j
    Jinv = np.linalg.inv(J)
    return np.einsum("nqj,bqji->bnqi", gref, Jinv)


def group_geometry(mesh, elements, p: int, vol_degree: int, face_degree: int) -> GroupGeometry:
    elements = np.asarray(elements, dtype=int)
    vq = triangle_quadrature(vol_degree)
    phi, gref = evaluate_basis(p, vq.points)
    x, J = mesh.map_reference(vq.points, elements)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    gphi = _physical_grads(gref, J)

    lq = line_quadrature(face_degree)
    s = lq.points[:, 0]
    nf = len(s)
    B = len(elements)
    fphi = np.empty((3, phi.shape[0], nf))
    fg = np.empty((B, 3, phi.shape[0], nf, 2))
    fx = np.empty((B, 3, nf, 2))
    fn = np.empty((B, 3, nf, 2))
    fw = np.empty((B, 3, nf))
    for f in range(3):
        xi = face_points(f, s)
        vals, g = evaluate_basis(p, xi)
        fphi[f] = vals
        xf, Jf = mesh.map_reference(xi, elements)
        t = np.einsum("bqij,j->bqi", Jf, face_tangent(f))
        length = np.linalg.norm(t, axis=-1)
        fx[:, f] = xf
        fn[:, f] = np.stack([t[..., 1], -t[..., 0]], axis=-1) / length[..., None]
        fw[:, f] = length * lq.weights
        fg[:, f] = _physical_grads(g, Jf)
    return GroupGeometry(elements, phi, gphi, x, det * vq.weights, s, fphi, fg, fx, fn, fw, lq.weights)


def edge_psi(P: int, s) -> np.ndarray:
    return evaluate_edge_basis(P, s)


def pad_batch(n: int, minimum: int = 8) -> int:
    """Bucketed batch size (power of two) to limit recompilation."""
    size = minimum
    while size < n:
        size *= 2
    return size


def pad_rows(a, size: int):
    """Pad the leading axis to ``size`` by repeating the first row."""
    a = np.asarray(a)
    if len(a) == size:
        return a
    reps = np.repeat(a[:1], size - len(a), axis=0)
    return np.concatenate([a, reps], axis=0)
