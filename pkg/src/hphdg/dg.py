"""Standard DG discretization with Lax-Friedrichs and BR2 fluxes.

Only the state coefficients W_K (m, n) are unknowns. Viscous gradients are
corrected element by element with BR2 liftings: for face f of K the lifting
r_f in the element space solves

    int_K r_f . tau = int_f (w_hat - w^-) tau . n

with w_hat the face average on interior faces and the viscous boundary state
on boundary faces. The element kernel receives the coefficients of the three
face neighbors, so its Jacobian yields the diagonal block and one
off-diagonal block per neighbor.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp

from .discretization import Discretization
from .geometry import _physical_grads, group_geometry, pad_batch, pad_rows
from .hdg import _force, _normal, _shock_density
from .krylov import LinearSolverConfig, solve_linear
from .space import evaluate_basis, face_points, n_modes

jax.config.update("jax_enable_x64", True)


@lru_cache(maxsize=None)
def dg_kernels(model, stab_key, viscous_force: bool = False):
    _, shock, eps0, beta, frozen, eta = stab_key
    viscous = model.viscous
    m = model.m
    fc = jax.vmap(model.convective_flux)
    fv = jax.vmap(model.viscous_flux) if viscous else None
    bstate = jax.vmap(model.boundary_state, in_axes=(None, 0, 0, 0))
    vbstate = jax.vmap(model.viscous_boundary_state, in_axes=(None, 0, 0, 0, 0)) if viscous else None
    wave = jax.vmap(model.max_wave_speed)

    def eps_of(W, d, c):
        phi = c[0]
        w = (W @ phi).T
        gw = jnp.einsum("cj,jqd->qcd", W, d["gphi"])
        dens = _shock_density(model, w, gw)
        return eps0 * d["htk"] ** (2.0 - beta) / d["area"] * jnp.dot(d["vol_w"], dens)

    def face_states(W, NB, d, c, f):
        """Own and neighbor traces, gradients and BR2 lifting data on face f."""
        fphi = c[1]
        nrm, ws = d["fn"][f], d["fw"][f]
        isint = d["isint"][f]
        wm = (W @ fphi[f]).T
        wp = jnp.where(isint, (NB[f] @ d["nbphi"][f]).T, wm)
        gm = jnp.einsum("cj,jqd->qcd", W, d["fgphi"][f])
        gp = jnp.einsum("cj,jqd->qcd", NB[f], d["nbgphi"][f])
        wvb = bstate(d["code"][f], wm, nrm, d["wext"][f]) if not viscous else \
            vbstate(d["code"][f], wm, gm, nrm, d["wext"][f])[0]
        jump = jnp.where(isint, 0.5 * (wp - wm), wvb - wm)
        rc = jnp.einsum("ij,jq,qc,qd,q->cdi", d["Minv"], fphi[f], jump, nrm, ws)
        rq = jnp.einsum("cdj,jq->qcd", rc, fphi[f])
        rpc = jnp.einsum("ij,jq,qc,qd,q->cdi", d["nbMinv"][f], d["nbphi"][f], -jump, -nrm, ws)
        rp = jnp.einsum("cdj,jq->qcd", rpc, d["nbphi"][f])
        return wm, wp, gm, gp, rc, rq, rp

    def residual(z, d, c):
        phi, fphi = c[0], c[1]
        n = phi.shape[0]
        nP = d["nbphi"].shape[1]
        W = z[: m * n].reshape(m, n)
        NB = z[m * n:].reshape(3, m, nP)
        vw, gphi = d["vol_w"], d["gphi"]
        w = (W @ phi).T
        gw = jnp.einsum("cj,jqd->qcd", W, gphi)
        faces = [face_states(W, NB, d, c, f) for f in range(3)]
        flux = fc(w)
        if viscous:
            lift = sum(fs[4] for fs in faces)
            q = gw + jnp.einsum("cdj,jq->qcd", lift, phi)
            flux = flux - fv(w, q)
        R = -jnp.einsum("jqd,qcd,q->cj", gphi, flux, vw) - jnp.einsum("jq,qc,q->cj", phi, d["src"], vw)
        if shock:
            eps = eps_of(W, d, c)
            if frozen:
                eps = jax.lax.stop_gradient(eps)
            R = R + eps * jnp.einsum("jqd,qcd,q->cj", gphi, gw, vw)
        for f in range(3):
            wm, wp, gm, gp, _, rq, rp = faces[f]
            nrm, ws = d["fn"][f], d["fw"][f]
            isint = d["isint"][f]
            a = jnp.max(jnp.maximum(wave(wm, nrm), wave(wp, nrm)))
            fi = 0.5 * _normal(fc(wm) + fc(wp), nrm) - 0.5 * a * (wp - wm)
            code, wext = d["code"][f], d["wext"][f]
            fb = _normal(fc(bstate(code, wm, nrm, wext)), nrm)
            if viscous:
                fi = fi - 0.5 * _normal(fv(wm, gm + eta * rq) + fv(wp, gp + eta * rp), nrm)
                wvb, qb = vbstate(code, wm, gm + eta * rq, nrm, wext)
                fb = fb - _normal(fv(wvb, qb), nrm)
            fhat = jnp.where(isint, fi, fb)
            R = R + jnp.einsum("jq,qc,q->cj", fphi[f], fhat, ws)
        return R.ravel()

    def with_jac(z, d, c):
        J, r = jax.jacfwd(lambda zz: (residual(zz, d, c),) * 2, has_aux=True)(z)
        return r, J

    def functional(W_flat, d, c):
        phi, fphi, psi_fun = c[0], c[1], c[2]
        n = phi.shape[0]
        W = W_flat.reshape(m, n)
        w = (W @ phi).T
        J = jnp.sum(d["vweight"] * w * d["vol_w"][:, None])
        integrand = jax.vmap(lambda wb, qb, nn: _force(model, wb, qb, nn, psi_fun, viscous_force))
        zero_nb = jnp.zeros((3, m, d["nbphi"].shape[1]))
        for f in range(3):
            nrm = d["fn"][f]
            wm, _, gm, _, _, rq, _ = face_states(W, zero_nb, d, c, f)
            wb = bstate(d["code"][f], wm, nrm, d["wext"][f])
            if viscous:
                _, qb = vbstate(d["code"][f], wm, gm + eta * rq, nrm, d["wext"][f])
            else:
                qb = jnp.zeros(wm.shape + (2,))
            val = jnp.sum(integrand(wb, qb, nrm) * d["fw"][f])
            J = J + jnp.where(d["isfun"][f], val, 0.0)
        return J

    def eps_kernel(W_flat, d, c):
        phi = c[0]
        return eps_of(W_flat.reshape(m, phi.shape[0]), d, c)

    axes = (0, 0, None)
    return {
        "residual": jax.jit(jax.vmap(residual, in_axes=axes)),
        "jacobian": jax.jit(jax.vmap(with_jac, in_axes=axes)),
        "functional": jax.jit(jax.vmap(jax.value_and_grad(functional), in_axes=axes)),
        "eps": jax.jit(jax.vmap(eps_kernel, in_axes=axes)),
    }


@dataclass
class _DGGroup:
    elements: np.ndarray
    p: int
    P: int
    geom: object
    data: dict
    consts: tuple
    nb: np.ndarray      # (B, 3) neighbor ids, -1 on the boundary
    size: int


class DG(Discretization):
    """Non-hybridized DG discretization on a fixed mesh and degree distribution."""

    method = "dg"

    def __init__(self, mesh, problem, degrees, stabilization=None, scale_degrees=None):
        super().__init__(mesh, problem, degrees, stabilization, scale_degrees)
        m = self.m
        self._set_layout(m * self.n_modes, np.zeros(mesh.n_elements, dtype=int))
        self.n_dof = self.n_local
        fun = problem.functional
        self._kernels = dg_kernels(self.model, self.stab.key(), bool(fun is not None and fun.viscous))
        self.neighbors = mesh.element_neighbors()
        self._minv = self._mass_inverses()
        self.groups = self._build_groups()

    def _mass_inverses(self):
        out = [None] * self.mesh.n_elements
        for p, elems in self._degree_groups():
            cv = np.any(self.mesh.geo_degree[elems] > 1)
            g = group_geometry(self.mesh, elems, p, 2 * p + 2 + (4 if cv else 0), 1)
            inv = np.linalg.inv(g.mass)
            for b, K in enumerate(elems):
                out[K] = inv[b]
        return out

    def _build_groups(self):
        mesh, pk = self.mesh, self.degrees.p_K
        nb = self.neighbors
        P_nb = np.where(nb >= 0, pk[np.maximum(nb, 0)], -1).max(axis=1)
        P_nb = np.maximum(P_nb, 0)
        curved = (mesh.geo_degree > 1).astype(int)
        groups = []
        for key in sorted({(int(a), int(b), int(c)) for a, b, c in zip(pk, P_nb, curved)}):
            p, P, cv = key
            elems = np.flatnonzero((pk == p) & (P_nb == P) & (curved == cv))
            nz = self.m * (n_modes(p) + 3 * n_modes(P))
            per = max(8, int(160e6 // (8 * nz * self.m * n_modes(p) * 2)))
            for start in range(0, len(elems), per):
                groups.append(self._make_group(elems[start:start + per], p, P, cv))
        return groups

    def _make_group(self, elems, p, P, curved):
        mesh, m = self.mesh, self.m
        qmax = max(p, P)
        extra = 4 if curved else 0
        g = group_geometry(mesh, elems, p, 2 * p + 2 + extra, 2 * qmax + 2 + extra)
        B, nf, nP = len(elems), len(g.face_s), n_modes(P)
        isint, code, isfun = self._face_codes(elems)
        nb = self.neighbors[elems]
        nbphi = np.zeros((B, 3, nP, nf))
        nbgphi = np.zeros((B, 3, nP, nf, 2))
        nbMinv = np.zeros((B, 3, nP, nP))
        # neighbor face index of the shared edge
        nbface = np.full((B, 3), -1)
        ie = mesh.interior_edges
        for b, f in zip(*np.nonzero(isint)):
            e = ie[mesh.face_index[elems[b], f]]
            nbface[b, f] = e[5] if e[2] == elems[b] else e[4]
        pk = self.degrees.p_K
        for fp in range(3):
            xi = face_points(fp, -g.face_s)
            for q in np.unique(pk[nb[isint]]) if np.any(isint) else []:
                sel = isint & (nbface == fp) & (pk[np.maximum(nb, 0)] == q)
                if not np.any(sel):
                    continue
                bs, fs = np.nonzero(sel)
                vals, gref = evaluate_basis(int(q), xi)
                _, J = mesh.map_reference(xi, nb[bs, fs])
                nq = n_modes(int(q))
                nbphi[bs, fs, :nq] = vals
                nbgphi[bs, fs, :nq] = _physical_grads(gref, J)
                for b, f in zip(bs, fs):
                    nbMinv[b, f, :nq, :nq] = self._minv[nb[b, f]]
        wext = self.problem.external_state(g.face_x.reshape(-1, 2)).reshape(B, 3, nf, m)
        src = self.problem.source_values(g.vol_x.reshape(-1, 2)).reshape(B, -1, m)
        size = pad_batch(B)
        data = {
            "gphi": g.gphi, "vol_w": g.vol_w, "src": src, "vweight": self._volume_weight(g.vol_x),
            "fn": g.face_n, "fw": g.face_w, "fgphi": g.face_gphi, "wext": wext, "code": code,
            "isint": isint, "isfun": isfun, "Minv": np.stack([self._minv[K] for K in elems]),
            "nbphi": nbphi, "nbgphi": nbgphi, "nbMinv": nbMinv,
            "htk": mesh.h()[elems] / np.maximum(self.scale_degrees.p_K[elems], 1), "area": g.areas,
        }
        data = {k: pad_rows(v, size) for k, v in data.items()}
        consts = (jnp.asarray(g.phi), jnp.asarray(g.face_phi), jnp.asarray(self._functional_psi()))
        return _DGGroup(elems, p, P, g, data, consts, nb, size)

    # -- gathering ----------------------------------------------------------
    def _gather(self, g: _DGGroup, x):
        m, n, nP = self.m, n_modes(g.p), n_modes(g.P)
        B = len(g.elements)
        idx = self.elem_offset[g.elements][:, None] + np.arange(m * n)
        W = x[idx]
        NB = np.zeros((B, 3, m, nP))
        pk = self.degrees.p_K
        for f in range(3):
            nbf = g.nb[:, f]
            for q in np.unique(pk[nbf[nbf >= 0]]):
                sel = np.flatnonzero((nbf >= 0) & (pk[np.maximum(nbf, 0)] == q))
                nq = n_modes(int(q))
                cols = self.elem_offset[nbf[sel]][:, None] + np.arange(m * nq)
                NB[sel, f, :, :nq] = x[cols].reshape(len(sel), m, nq)
        return W, NB

    def _check(self, g, W):
        if self.model.check_states(np.ones((1, self.m))) is None:
            return
        vals = np.einsum("bcj,jq->bqc", W.reshape(len(W), self.m, -1), g.geom.phi)
        self.check_admissible(g.elements, vals)
        fv = np.einsum("bcj,fjq->bfqc", W.reshape(len(W), self.m, -1), g.geom.face_phi)
        self.check_admissible(g.elements, fv.reshape(len(W), -1, self.m))

    def _batch(self, g, x):
        W, NB = self._gather(g, x)
        self._check(g, W)
        return pad_rows(np.concatenate([W, NB.reshape(len(W), -1)], axis=1), g.size)

    def _update_eps(self, x):
        if not self.stab.key()[1]:
            return None
        eps = np.zeros(self.mesh.n_elements)
        for g in self.groups:
            W, _ = self._gather(g, x)
            eps[g.elements] = np.asarray(self._kernels["eps"](pad_rows(W, g.size), g.data, g.consts))[: len(W)]
        return eps

    def shock_viscosity(self, x):
        eps = self._update_eps(x)
        return np.zeros(self.mesh.n_elements) if eps is None else eps

    # -- residual / Jacobian ------------------------------------------------
    def residual(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.zeros(self.n_dof)
        for g in self.groups:
            out = np.asarray(self._kernels["residual"](self._batch(g, x), g.data, g.consts))
            idx = self.elem_offset[g.elements][:, None] + np.arange(out.shape[1])
            r[idx] = out[: len(g.elements)]
        return r

    def linearize(self, x, dt=None) -> "DGLinearization":
        x = np.asarray(x, dtype=float)
        r = np.zeros(self.n_dof)
        rows, cols, vals = [], [], []
        m = self.m
        pk = self.degrees.p_K
        diag_pos = []
        for g in self.groups:
            res, jac = self._kernels["jacobian"](self._batch(g, x), g.data, g.consts)
            B = len(g.elements)
            res = np.asarray(res)[:B]
            jac = np.asarray(jac)[:B]
            n, nP = n_modes(g.p), n_modes(g.P)
            ridx = self.elem_offset[g.elements][:, None] + np.arange(m * n)
            r[ridx] = res
            own = jac[:, :, : m * n]
            rows.append(np.repeat(ridx, m * n, axis=1).ravel())
            cols.append(np.tile(ridx, (1, m * n)).ravel())
            vals.append(own.ravel())
            diag_pos.append((g, ridx))
            nbj = jac[:, :, m * n:].reshape(B, m * n, 3, m, nP)
            for f in range(3):
                nbf = g.nb[:, f]
                for q in np.unique(pk[nbf[nbf >= 0]]):
                    sel = np.flatnonzero((nbf >= 0) & (pk[np.maximum(nbf, 0)] == q))
                    nq = n_modes(int(q))
                    blk = nbj[sel, :, f, :, :nq].reshape(len(sel), m * n, m * nq)
                    cidx = self.elem_offset[nbf[sel]][:, None] + np.arange(m * nq)
                    rows.append(np.repeat(ridx[sel], m * nq, axis=1).ravel())
                    cols.append(np.tile(cidx, (1, m * n)).ravel())
                    vals.append(blk.ravel())
        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.n_dof, self.n_dof)).tocsr()
        lin = DGLinearization(self, r, A)
        if dt is not None:
            lin.add_time_term(dt)
        return lin

    def mass_matrix(self, dt=None) -> sp.csr_matrix:
        blocks = []
        for K in range(self.mesh.n_elements):
            M = np.linalg.inv(self._minv[K])
            if dt is not None:
                M = M / dt[K]
            blocks.append(np.kron(np.eye(self.m), M))
        return sp.block_diag(blocks, format="csr")

    # -- functional -----------------------------------------------------------
    def functional(self, x) -> float:
        return self._functional(x)[0]

    def functional_gradient(self, x) -> np.ndarray:
        return self._functional(x)[1]

    def _functional(self, x):
        if self.problem.functional is None:
            raise ValueError("problem has no target functional")
        x = np.asarray(x, dtype=float)
        total, grad = 0.0, np.zeros(self.n_dof)
        for g in self.groups:
            W, _ = self._gather(g, x)
            val, gr = self._kernels["functional"](pad_rows(W, g.size), g.data, g.consts)
            B = len(W)
            total += float(np.sum(np.asarray(val)[:B]))
            idx = self.elem_offset[g.elements][:, None] + np.arange(W.shape[1])
            grad[idx] = np.asarray(gr)[:B]
        return total, grad

    def block_centers(self) -> np.ndarray:
        return self.mesh.centroids()

    def nnz(self) -> int:
        """Structural nonzeros: diagonal blocks plus two coupling blocks per interior edge."""
        sizes = self.m * self.n_modes
        total = int(np.sum(sizes**2))
        ie = self.mesh.interior_edges
        if len(ie):
            total += int(np.sum(2 * sizes[ie[:, 2]] * sizes[ie[:, 3]]))
        return total


class DGLinearization:
    def __init__(self, disc: DG, residual, matrix):
        self.disc = disc
        self.r = residual
        self.A = matrix

    def add_time_term(self, dt) -> None:
        self.A = (self.A + self.disc.mass_matrix(dt)).tocsr()

    def full_matrix(self):
        return self.A

    def solve(self, config: LinearSolverConfig = LinearSolverConfig()):
        res = solve_linear(self.A, -self.r, config, block_ptr=self.disc.elem_offset,
                           block_key=self.disc.block_key())
        return res.x, res.iterations

    def solve_transpose(self, rhs, config: LinearSolverConfig = LinearSolverConfig()):
        res = solve_linear(self.A.T.tocsr(), rhs, config, block_ptr=self.disc.elem_offset,
                           block_key=self.disc.block_key(transpose=True))
        return res.x, res.iterations
