"""Functionality shared by the HDG and DG discretizations."""
from __future__ import annotations

import numpy as np

from .mesh import BOUNDARY, INTERIOR
from .physics import TAG_CODES, AdmissibilityError, Stabilization
from .space import DegreeMap, evaluate_basis, n_modes, project_degree, triangle_quadrature

PHI0 = 1.0 / np.sqrt(2.0)  # value of the constant orthonormal mode


class Discretization:
    """Base class: owns the mesh, problem, degrees and the W layout.

    Subclasses define ``local_size`` (per-element block length), ``w_start``
    (offset of W inside that block) and ``n_dof``.
    """

    method = "base"

    def __init__(self, mesh, problem, degrees, stabilization: Stabilization | None = None,
                 scale_degrees: DegreeMap | None = None):
        if not isinstance(degrees, DegreeMap):
            degrees = DegreeMap(mesh, degrees)
        if degrees.mesh is not mesh:
            degrees = DegreeMap(mesh, degrees.p_K, degrees.p_min, degrees.p_max)
        # degrees entering the length scales h/p of the stabilization; the
        # enriched adjoint space keeps the primal ones so that both spaces
        # discretize the same equations
        if scale_degrees is None:
            scale_degrees = degrees
        elif len(scale_degrees.p_K) != mesh.n_elements:
            raise ValueError("scale degrees must live on the same mesh")
        self.scale_degrees = scale_degrees
        self.mesh = mesh
        self.problem = problem
        self.model = problem.model
        self.m = self.model.m
        self.degrees = degrees
        self.stab = stabilization or Stabilization()
        fun = problem.functional
        if fun is not None:
            if fun.is_boundary:
                fun.check(self.model)
            elif fun.viscous:
                raise ValueError("volume functional cannot be viscous")
        self.n_modes = np.array([n_modes(int(p)) for p in degrees.p_K], dtype=int)

    # -- layout -----------------------------------------------------------
    def _set_layout(self, local_size, w_start):
        self.local_size = np.asarray(local_size, dtype=int)
        self.elem_offset = np.concatenate([[0], np.cumsum(self.local_size)])
        self.w_start = np.asarray(w_start, dtype=int)
        self.n_local = int(self.elem_offset[-1])

    def w_indices(self, K: int) -> np.ndarray:
        start = self.elem_offset[K] + self.w_start[K]
        return np.arange(start, start + self.m * self.n_modes[K])

    def element_W(self, x, K: int) -> np.ndarray:
        return np.asarray(x)[self.w_indices(K)].reshape(self.m, self.n_modes[K])

    def set_element_W(self, x, K: int, W) -> None:
        x[self.w_indices(K)] = np.asarray(W).ravel()

    def W_list(self, x):
        return [self.element_W(x, K) for K in range(self.mesh.n_elements)]

    @property
    def ndof_w(self) -> int:
        return self.degrees.ndof_w(self.m)

    def mean_states(self, x) -> np.ndarray:
        """Approximate element means (T, m) from the constant mode."""
        idx = self.elem_offset[:-1] + self.w_start
        cols = idx[:, None] + np.arange(self.m)[None, :] * self.n_modes[:, None]
        return np.asarray(x)[cols] * PHI0

    # -- evaluation -------------------------------------------------------
    def _degree_groups(self):
        pk = self.degrees.p_K
        for p in np.unique(pk):
            yield int(p), np.flatnonzero(pk == p)

    def state_at(self, x, xi, elements=None) -> np.ndarray:
        """Solution values (B, npts, m) at reference points ``xi`` of the given elements."""
        elements = np.arange(self.mesh.n_elements) if elements is None else np.asarray(elements)
        out = np.empty((len(elements), len(xi), self.m))
        pk = self.degrees.p_K[elements]
        for p in np.unique(pk):
            sel = np.flatnonzero(pk == p)
            phi, _ = evaluate_basis(int(p), xi)
            W = np.stack([self.element_W(x, K) for K in elements[sel]])
            out[sel] = np.einsum("bcj,jq->bqc", W, phi)
        return out

    def project(self, func, x=None) -> np.ndarray:
        """L2 projection of ``func`` (points (npts,2) -> (npts,m)) onto the state space."""
        x = self.zeros() if x is None else x.copy()
        for p, elems in self._degree_groups():
            deg = 2 * p + 2 + 4 * int(np.any(self.mesh.geo_degree[elems] > 1))
            q = triangle_quadrature(deg)
            phi, _ = evaluate_basis(p, q.points)
            pts, J = self.mesh.map_reference(q.points, elems)
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            wts = det * q.weights
            vals = np.asarray(func(pts.reshape(-1, 2)), dtype=float).reshape(len(elems), -1, self.m)
            M = np.einsum("iq,jq,bq->bij", phi, phi, wts)
            rhs = np.einsum("iq,bqc,bq->bic", phi, vals, wts)
            W = np.linalg.solve(M, rhs)
            for b, K in enumerate(elems):
                self.set_element_W(x, K, W[b].T)
        self._complete_projection(x)
        return x

    def _complete_projection(self, x) -> None:
        pass

    def transfer_degrees(self, x, other) -> np.ndarray:
        """Map ``x`` to ``other`` (same mesh, different degrees) by padding or truncating modes."""
        if other.mesh.n_elements != self.mesh.n_elements:
            raise ValueError("degree transfer needs the same mesh")
        x = np.asarray(x, dtype=float)
        y = other.zeros()
        for K in range(self.mesh.n_elements):
            n0, n1 = self.n_modes[K], other.n_modes[K]
            blocks = self.local_size[K] // (self.m * n0)
            a = x[self.elem_offset[K]:self.elem_offset[K + 1]].reshape(blocks, self.m, n0)
            b = project_degree(a, int(self.degrees.p_K[K]), int(other.degrees.p_K[K]))
            y[other.elem_offset[K]:other.elem_offset[K + 1]] = b.ravel()
        return y

    def flow_direction(self) -> np.ndarray:
        """Unit transport direction (free-stream velocity or advection field; zero if none)."""
        if hasattr(self.model, "gas"):
            w = self.problem.freestream
            w = self.model.gas.freestream() if w is None else np.asarray(w, dtype=float)
            d = np.asarray(w[1:3], dtype=float)
        else:
            d = np.asarray(self.model.b, dtype=float)
        nrm = np.linalg.norm(d)
        return d / nrm if nrm > 0 else np.zeros(2)

    def block_key(self, transpose: bool = False) -> np.ndarray:
        """Position of every linear-system block along the flow (reversed for adjoints)."""
        key = self.block_centers() @ self.flow_direction()
        return -key if transpose else key

    def initial_state(self) -> np.ndarray:
        """Free-stream state for gas models, zero for the scalar model."""
        if hasattr(self.model, "gas"):
            w = self.problem.freestream
            w = self.model.gas.freestream() if w is None else np.asarray(w, dtype=float)
            return self.project(lambda pts: np.broadcast_to(w, (len(pts), self.m)))
        return self.zeros()

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_dof)

    def l2_error(self, x, exact, component=None) -> float:
        total = 0.0
        for p, elems in self._degree_groups():
            q = triangle_quadrature(2 * p + 6)
            pts, J = self.mesh.map_reference(q.points, elems)
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            wh = self.state_at(x, q.points, elems)
            we = np.asarray(exact(pts.reshape(-1, 2))).reshape(wh.shape)
            err = (wh - we) ** 2
            if component is not None:
                err = err[..., component]
            else:
                err = err.sum(axis=-1)
            total += float(np.sum(err * det * q.weights))
        return float(np.sqrt(total))

    def check_admissible(self, elements, values) -> None:
        bad = self.model.check_states(values)
        if bad is None:
            return
        bad = np.asarray(bad).reshape(len(elements), -1).any(axis=1)
        if np.any(bad):
            K = int(elements[np.flatnonzero(bad)[0]])
            raise AdmissibilityError("non-admissible state at quadrature point", element=K)

    # -- per-face data shared by both methods ----------------------------
    def _face_codes(self, elems):
        mesh = self.mesh
        fk = mesh.face_kind[elems]
        fi = mesh.face_index[elems]
        code = np.zeros(fk.shape, dtype=int)
        isfun = np.zeros(fk.shape, dtype=bool)
        fun = self.problem.functional
        for b, f in zip(*np.nonzero(fk == BOUNDARY)):
            tag = mesh.boundary_tags[fi[b, f]]
            code[b, f] = TAG_CODES[tag]
            if fun is not None and fun.is_boundary and tag in fun.wall_tags:
                isfun[b, f] = True
        return fk == INTERIOR, code, isfun

    def _volume_weight(self, pts):
        fun = self.problem.functional
        if fun is None or fun.is_boundary:
            return np.zeros(pts.shape[:-1] + (self.m,))
        if fun.volume_weight is None:
            return np.ones(pts.shape[:-1] + (self.m,))
        vals = np.asarray(fun.volume_weight(pts.reshape(-1, 2)), dtype=float)
        return vals.reshape(pts.shape[:-1] + (self.m,))

    def _functional_psi(self):
        fun = self.problem.functional
        if fun is None or not fun.is_boundary:
            return np.zeros(2)
        return fun.psi()
