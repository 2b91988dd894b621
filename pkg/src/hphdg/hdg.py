"""Hybridized discontinuous Galerkin discretization.

Unknowns per element K are the gradient coefficients Q_K (m, 2, n), stored
only for viscous models, and the state coefficients W_K (m, n). The trace
Lambda lives on interior edges with m * (p_e + 1) Legendre coefficients in
the edge direction (lower to higher vertex id). The global vector stacks the
element blocks [Q_K, W_K] followed by all trace blocks.

Element residuals and their exact Jacobians come from one JAX kernel per
(p_K, max trace degree, curved) group; the kernel sees the element's own
unknowns and the traces of its three faces, so the local blocks and the
element's contributions to the trace rows are available together.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np
import scipy.sparse as sp

from .discretization import Discretization
from .krylov import LinearSolverConfig, solve_linear
from .geometry import edge_psi, group_geometry, pad_batch, pad_rows
from .mesh import INTERIOR
from .physics import AdmissibilityError
from .space import n_modes, project_edge_degree

jax.config.update("jax_enable_x64", True)

MAX_BATCH_BYTES = 160e6


class LocalSolveError(np.linalg.LinAlgError):
    def __init__(self, element):
        super().__init__(f"singular local system on element {element}")
        self.element = element


# ---------------------------------------------------------------------------
# Element kernels
# ---------------------------------------------------------------------------

def _shock_density(model, w, gw):
    """Sum over components of |div f_c(w)| at each point; w (nq,m), gw (nq,m,2)."""
    def div(wq, gq):
        _, dfx = jax.jvp(model.convective_flux, (wq,), (gq[:, 0],))
        _, dfy = jax.jvp(model.convective_flux, (wq,), (gq[:, 1],))
        return jnp.sum(jnp.abs(dfx[:, 0] + dfy[:, 1]))
    return jax.vmap(div)(w, gw)


def _normal(F, nrm):
    return jnp.einsum("qcd,qd->qc", F, nrm)


@lru_cache(maxsize=None)
def hdg_kernels(model, stab_key, viscous_force: bool = False):
    """Jitted, vmapped element kernels for one model and stabilization setting."""
    alpha_const, shock, eps0, beta, frozen, _ = stab_key
    viscous = model.viscous
    m = model.m
    fc = jax.vmap(model.convective_flux)
    fv = jax.vmap(model.viscous_flux) if viscous else None
    bstate = jax.vmap(model.boundary_state, in_axes=(None, 0, 0, 0))
    vbstate = jax.vmap(model.viscous_boundary_state, in_axes=(None, 0, 0, 0, 0)) if viscous else None
    wave = jax.vmap(model.max_wave_speed)
    diff = jax.vmap(model.diffusivity)

    def unpack(U, n):
        if viscous:
            return U[: 2 * m * n].reshape(m, 2, n), U[2 * m * n:].reshape(m, n)
        return None, U.reshape(m, n)

    def eps_of(W, d, c):
        phi = c[0]
        w = (W @ phi).T
        gw = jnp.einsum("cj,jqd->qcd", W, d["gphi"])
        dens = _shock_density(model, w, gw)
        return eps0 * d["htk"] ** (2.0 - beta) / d["area"] * jnp.dot(d["vol_w"], dens)

    def residual(z, d, c):
        phi, fphi, psi = c[0], c[1], c[2]
        n = phi.shape[0]
        P1 = psi.shape[0]
        nl = z.shape[0] - 3 * m * P1
        Q, W = unpack(z[:nl], n)
        L = z[nl:].reshape(3, m, P1)
        vw = d["vol_w"]
        gphi = d["gphi"]
        w = (W @ phi).T
        gw = jnp.einsum("cj,jqd->qcd", W, gphi)
        if viscous:
            q = jnp.einsum("cdj,jq->qcd", Q, phi)
            flux = fc(w) - fv(w, q)
            grad = q
        else:
            flux = fc(w)
            grad = gw
        Rw = -jnp.einsum("jqd,qcd,q->cj", gphi, flux, vw) - jnp.einsum("jq,qc,q->cj", phi, d["src"], vw)
        eps = 0.0
        if shock:
            eps = eps_of(W, d, c)
            if frozen:
                eps = jax.lax.stop_gradient(eps)
            Rw = Rw + eps * jnp.einsum("jqd,qcd,q->cj", gphi, grad, vw)
        if viscous:
            Rq = jnp.einsum("jq,qcd,q->cdj", phi, q, vw) + jnp.einsum("jqd,qc,q->cdj", gphi, w, vw)
        Rl = []
        for f in range(3):
            isint = d["isint"][f]
            nrm = d["fn"][f]
            ws = d["fw"][f]
            wf = (W @ fphi[f]).T
            lam = jnp.where(isint, (L[f] @ psi).T, wf)
            qf = jnp.einsum("cdj,jq->qcd", Q, fphi[f]) if viscous else None
            fl = _normal(fc(lam), nrm)
            if viscous:
                fl = fl - _normal(fv(lam, qf), nrm)
            if alpha_const is None:
                a = wave(lam, nrm) + (diff(lam) + eps) / d["htil"][f]
            else:
                a = jnp.full(ws.shape, alpha_const)
            fl = fl + a[:, None] * (wf - lam)

            code = d["code"][f]
            wext = d["wext"][f]
            fb = _normal(fc(bstate(code, wf, nrm, wext)), nrm)
            if viscous:
                wvb, qb = vbstate(code, wf, qf, nrm, wext)
                fb = fb - _normal(fv(wvb, qb), nrm)
                if alpha_const is None:
                    ab = (diff(wf) + eps) / d["htil"][f]
                else:
                    ab = jnp.full(ws.shape, alpha_const)
                fb = fb + ab[:, None] * (wf - wvb)
                lamhat = jnp.where(isint, lam, wvb)
                Rq = Rq - jnp.einsum("jq,qd,qc,q->cdj", fphi[f], nrm, lamhat, ws)
            fhat = jnp.where(isint, fl, fb)
            Rw = Rw + jnp.einsum("jq,qc,q->cj", fphi[f], fhat, ws)
            Rl.append(jnp.where(isint, jnp.einsum("kq,qc,q->ck", psi, fl, ws), 0.0))
        parts = [Rq.ravel()] if viscous else []
        parts += [Rw.ravel(), jnp.stack(Rl).ravel()]
        return jnp.concatenate(parts)

    def with_jac(z, d, c):
        J, r = jax.jacfwd(lambda zz: (residual(zz, d, c),) * 2, has_aux=True)(z)
        return r, J

    def functional(U, d, c):
        phi, fphi, psi_fun = c[0], c[1], c[3]
        n = phi.shape[0]
        Q, W = unpack(U, n)
        w = (W @ phi).T
        J = jnp.sum(d["vweight"] * w * d["vol_w"][:, None])
        integrand = jax.vmap(lambda wb, qb, nn: _force(model, wb, qb, nn, psi_fun, viscous_force))
        for f in range(3):
            nrm = d["fn"][f]
            wf = (W @ fphi[f]).T
            wb = bstate(d["code"][f], wf, nrm, d["wext"][f])
            if viscous:
                qf = jnp.einsum("cdj,jq->qcd", Q, fphi[f])
                _, qb = vbstate(d["code"][f], wf, qf, nrm, d["wext"][f])
            else:
                qb = jnp.zeros(wf.shape + (2,))
            val = jnp.sum(integrand(wb, qb, nrm) * d["fw"][f])
            J = J + jnp.where(d["isfun"][f], val, 0.0)
        return J

    def eps_kernel(U, d, c):
        phi = c[0]
        _, W = unpack(U, phi.shape[0])
        return eps_of(W, d, c)

    axes = (0, 0, None)
    return {
        "residual": jax.jit(jax.vmap(residual, in_axes=axes)),
        "jacobian": jax.jit(jax.vmap(with_jac, in_axes=axes)),
        "functional": jax.jit(jax.vmap(jax.value_and_grad(functional), in_axes=axes)),
        "eps": jax.jit(jax.vmap(eps_kernel, in_axes=axes)),
    }


def _force(model, wb, qb, nrm, psi, viscous_force):
    if model.m != 4:
        return 0.0 * wb[0]
    force = model.pressure(wb) * nrm
    if viscous_force:
        force = force - model.stress(wb, qb) @ nrm
    return jnp.dot(psi, force)


# ---------------------------------------------------------------------------
# Groups
# ---------------------------------------------------------------------------

@dataclass
class _Group:
    elements: np.ndarray
    p: int
    P: int
    geom: object
    data: dict           # per-element arrays, padded, as jax arrays
    consts: tuple
    uidx: np.ndarray     # (B, nl) global indices of the local unknowns
    tmap: np.ndarray     # (B, 3*m*(P+1)) trace index relative to the trace block, -1 if absent
    tsign: np.ndarray    # (B, 3*m*(P+1))
    size: int            # padded batch size

    @property
    def nl(self):
        return self.uidx.shape[1]

    @property
    def nt(self):
        return self.tmap.shape[1]


class HDG(Discretization):
    """HDG discretization on a fixed mesh and degree distribution."""

    method = "hdg"

    def __init__(self, mesh, problem, degrees, stabilization=None, scale_degrees=None):
        super().__init__(mesh, problem, degrees, stabilization, scale_degrees)
        m = self.m
        nK = self.n_modes
        self.viscous = self.model.viscous
        blocks = 3 if self.viscous else 1
        self._set_layout(blocks * m * nK, (blocks - 1) * m * nK)
        pe = self.degrees.p_e
        self.lam_size = m * (pe + 1)
        self.lam_offset = np.concatenate([[0], np.cumsum(self.lam_size)]).astype(int)
        self.n_lambda = int(self.lam_offset[-1])
        self.n_dof = self.n_local + self.n_lambda
        fun = problem.functional
        self._kernels = hdg_kernels(self.model, self.stab.key(),
                                    bool(fun is not None and fun.viscous))
        self.groups = self._build_groups()

    # -- setup ------------------------------------------------------------
    def _build_groups(self):
        mesh = self.mesh
        pk = self.degrees.p_K
        pe = self.degrees.p_e
        P_K = pk.copy()
        ie = mesh.interior_edges
        if len(ie):
            np.maximum.at(P_K, ie[:, 2], pe)
            np.maximum.at(P_K, ie[:, 3], pe)
        curved = (mesh.geo_degree > 1).astype(int)
        keys = sorted({(int(a), int(b), int(c)) for a, b, c in zip(pk, P_K, curved)})
        groups = []
        for p, P, cv in keys:
            elems = np.flatnonzero((pk == p) & (P_K == P) & (curved == cv))
            nl = int(self.local_size[elems[0]])
            nz = nl + 3 * self.m * (P + 1)
            per = max(8, int(MAX_BATCH_BYTES // (8 * nz * nz * 2)))
            for start in range(0, len(elems), per):
                groups.append(self._make_group(elems[start:start + per], p, P, cv))
        return groups

    def _make_group(self, elems, p, P, curved):
        mesh, m = self.mesh, self.m
        extra = 4 if curved else 0
        vol_deg = 2 * p + 2 + extra
        face_deg = 2 * P + 2 + extra
        g = group_geometry(mesh, elems, p, vol_deg, face_deg)
        B = len(elems)
        P1 = P + 1
        nf = len(g.face_s)
        isint, code, isfun = self._face_codes(elems)
        fi = mesh.face_index[elems]
        pe_f = np.where(isint, self.degrees.p_e[np.where(isint, fi, 0)] if len(self.degrees.p_e) else 0,
                        self.degrees.p_K[elems][:, None])
        k = np.arange(P1)
        cidx = np.arange(m)
        base = np.where(isint, self.lam_offset[np.where(isint, fi, 0)] if self.n_lambda else 0, 0)
        idx = base[:, :, None, None] + cidx[None, None, :, None] * (pe_f + 1)[:, :, None, None] + k
        valid = isint[:, :, None, None] & (k <= pe_f[:, :, None, None])
        tmap = np.where(valid, idx, -1).reshape(B, -1)
        sign = mesh.face_sign[elems][:, :, None, None]
        tsign = np.where(sign < 0, (-1.0) ** k, 1.0) * np.ones((1, 1, m, 1))
        tsign = tsign.reshape(B, -1)

        lengths = mesh.edge_lengths()[elems]
        sd = self.scale_degrees
        ps_f = np.where(isint, sd.p_e[np.where(isint, fi, 0)] if len(sd.p_e) else 0, sd.p_K[elems][:, None])
        htil = lengths / np.maximum(ps_f, 1)
        wext = self.problem.external_state(g.face_x.reshape(-1, 2)).reshape(B, 3, nf, m)
        src = self.problem.source_values(g.vol_x.reshape(-1, 2)).reshape(B, -1, m)
        vweight = self._volume_weight(g.vol_x)
        areas = g.areas
        htk = mesh.h()[elems] / np.maximum(sd.p_K[elems], 1)
        size = pad_batch(B)
        data = {
            "gphi": g.gphi, "vol_w": g.vol_w, "src": src, "vweight": vweight,
            "fn": g.face_n, "fw": g.face_w, "wext": wext, "code": code, "isint": isint,
            "isfun": isfun, "htil": htil, "htk": htk, "area": areas,
        }
        data = {key: pad_rows(val, size) for key, val in data.items()}
        psi = edge_psi(P, g.face_s)
        consts = (jnp.asarray(g.phi), jnp.asarray(g.face_phi), jnp.asarray(psi),
                  jnp.asarray(self._functional_psi()))
        nl = int(self.local_size[elems[0]])
        uidx = self.elem_offset[elems][:, None] + np.arange(nl)[None, :]
        return _Group(elems, p, P, g, data, consts, uidx, tmap, tsign, size)

    # -- gathering ----------------------------------------------------------
    def _gather(self, g: _Group, x):
        U = x[g.uidx]
        L = np.where(g.tmap >= 0, x[self.n_local + g.tmap], 0.0) * g.tsign
        return U, L

    def _check_states(self, g: _Group, U, L):
        if self.model.check_states(np.zeros((1, self.m))) is None:
            return
        m, n = self.m, n_modes(g.p)
        W = U[:, -m * n:].reshape(-1, m, n)
        vals = np.einsum("bcj,jq->bqc", W, g.geom.phi)
        self.check_admissible(g.elements, vals)
        psi = np.asarray(g.consts[2])
        lam = np.einsum("bfck,kq->bfqc", L.reshape(len(U), 3, m, -1), psi)
        isint = g.data["isint"][: len(U)]
        bad = self.model.check_states(lam).any(axis=2) & isint
        if np.any(bad):
            K = int(g.elements[np.flatnonzero(bad.any(axis=1))[0]])
            raise AdmissibilityError("non-admissible trace state", element=K)

    def _batch(self, g: _Group, x, check=True):
        U, L = self._gather(g, x)
        if check:
            self._check_states(g, U, L)
        z = pad_rows(np.concatenate([U, L], axis=1), g.size)
        return z

    def shock_viscosity(self, x) -> np.ndarray:
        """Element artificial viscosity (zero when shock capturing is off)."""
        eps = np.zeros(self.mesh.n_elements)
        if not self.stab.key()[1]:
            return eps
        for g in self.groups:
            U, _ = self._gather(g, x)
            out = self._kernels["eps"](pad_rows(U, g.size), g.data, g.consts)
            eps[g.elements] = np.asarray(out)[: len(g.elements)]
        return eps

    # -- residual / Jacobian ------------------------------------------------
    def residual(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.zeros(self.n_dof)
        for g in self.groups:
            z = self._batch(g, x)
            out = np.asarray(self._kernels["residual"](z, g.data, g.consts))[: len(g.elements)]
            r[g.uidx] = out[:, : g.nl]
            self._scatter_trace(r, g, out[:, g.nl:])
        return r

    def _scatter_trace(self, r, g, vals):
        ok = g.tmap >= 0
        np.add.at(r, self.n_local + g.tmap[ok], (vals * g.tsign)[ok])

    def linearize(self, x, dt=None) -> "HDGLinearization":
        """Residual and element blocks at ``x``.

        ``dt`` is an optional per-element pseudo-time step; when given, M_K/dt_K
        is added to the state-state block. ``dt=None`` is pure Newton.
        """
        x = np.asarray(x, dtype=float)
        r = np.zeros(self.n_dof)
        blocks = []
        for g in self.groups:
            z = self._batch(g, x)
            res, jac = self._kernels["jacobian"](z, g.data, g.consts)
            B = len(g.elements)
            res = np.asarray(res)[:B]
            jac = np.array(jac[:B])
            r[g.uidx] = res[:, : g.nl]
            self._scatter_trace(r, g, res[:, g.nl:])
            if dt is not None:
                self._add_mass(g, jac, dt)
            blocks.append(jac)
        return HDGLinearization(self, r, blocks)

    def _add_mass(self, g, jac, dt):
        n = n_modes(g.p)
        M = g.geom.mass / np.asarray(dt)[g.elements][:, None, None]
        start = g.nl - self.m * n
        for c in range(self.m):
            s = start + c * n
            jac[:, s:s + n, s:s + n] += M

    def mass_diagonal_blocks(self):
        return {int(K): M for g in self.groups for K, M in zip(g.elements, g.geom.mass)}

    # -- functional -----------------------------------------------------------
    def functional(self, x) -> float:
        return self._functional(x)[0]

    def functional_gradient(self, x) -> np.ndarray:
        return self._functional(x)[1]

    def _functional(self, x):
        if self.problem.functional is None:
            raise ValueError("problem has no target functional")
        x = np.asarray(x, dtype=float)
        total = 0.0
        grad = np.zeros(self.n_dof)
        for g in self.groups:
            U, _ = self._gather(g, x)
            val, gr = self._kernels["functional"](pad_rows(U, g.size), g.data, g.consts)
            B = len(g.elements)
            total += float(np.sum(np.asarray(val)[:B]))
            grad[g.uidx] = np.asarray(gr)[:B]
        return total, grad

    # -- projections ------------------------------------------------------------
    def _complete_projection(self, x) -> None:
        """Fill Q with the projected gradient of W and Lambda with averaged traces."""
        m = self.m
        lam = np.zeros(self.n_lambda)
        count = np.zeros(self.n_lambda)
        for g in self.groups:
            n = n_modes(g.p)
            U = x[g.uidx]
            W = U[:, -m * n:].reshape(-1, m, n)
            if self.viscous:
                geom = g.geom
                rhs = np.einsum("iq,bjqd,bcj,bq->bcdi", geom.phi, geom.gphi, W, geom.vol_w)
                Minv = np.linalg.inv(geom.mass)
                Qc = np.einsum("bij,bcdj->bcdi", Minv, rhs)
                x[g.uidx[:, : 2 * m * n]] = Qc.reshape(len(U), -1)
            psi = np.asarray(g.consts[2])
            tr = np.einsum("bcj,fjq,kq,q->bfck", W, g.geom.face_phi, psi, g.geom.face_lw)
            tr = tr.reshape(len(U), -1) * g.tsign
            ok = g.tmap >= 0
            np.add.at(lam, g.tmap[ok], tr[ok])
            np.add.at(count, g.tmap[ok], 1.0)
        x[self.n_local:] = lam / np.maximum(count, 1.0)

    def transfer_degrees(self, x, other) -> np.ndarray:
        y = super().transfer_degrees(x, other)
        pe0, pe1 = self.degrees.p_e, other.degrees.p_e
        for e in range(len(pe0)):
            a = np.asarray(x)[self.n_local + self.lam_offset[e]:self.n_local + self.lam_offset[e + 1]]
            b = project_edge_degree(a.reshape(self.m, -1), int(pe0[e]), int(pe1[e]))
            y[other.n_local + other.lam_offset[e]:other.n_local + other.lam_offset[e + 1]] = b.ravel()
        return y

    def block_centers(self) -> np.ndarray:
        ie = self.mesh.interior_edges
        return 0.5 * (self.mesh.vertices[ie[:, 0]] + self.mesh.vertices[ie[:, 1]])

    def trace_values(self, x):
        return np.asarray(x)[self.n_local:]

    # -- counting ---------------------------------------------------------------
    def nnz(self) -> int:
        """Exact number of structural nonzeros of the condensed trace matrix."""
        m = self.m
        size = self.degrees.p_e + 1
        total = int(np.sum((m * size) ** 2))
        fk, fi = self.mesh.face_kind, self.mesh.face_index
        for K in range(self.mesh.n_elements):
            faces = [fi[K, f] for f in range(3) if fk[K, f] == INTERIOR]
            for a in faces:
                for b in faces:
                    if a != b:
                        total += int(m * m * size[a] * size[b])
        return total


def _element_traces(g: _Group, lam) -> np.ndarray:
    """Trace coefficients seen by the elements of a group (zero on boundary faces)."""
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return np.zeros(g.tmap.shape)
    return np.where(g.tmap >= 0, lam[np.maximum(g.tmap, 0)], 0.0) * g.tsign


class HDGLinearization:
    """Residual, element blocks and their condensation at one state.

    Each block is the Jacobian of the element kernel with rows/columns
    [local unknowns (Q, W), face traces]. With the local unknowns split into
    Q and W this holds the matrices A..D (local), R, S (local-trace), L, M
    (trace-local) and the element contribution to N (trace-trace).
    """

    def __init__(self, disc: HDG, residual, blocks):
        self.disc = disc
        self.r = residual
        self.blocks = blocks
        self._inv = None

    def add_time_term(self, dt) -> None:
        """Add M_K / dt_K to every state-state block."""
        for g, J in zip(self.disc.groups, self.blocks):
            self.disc._add_mass(g, J, dt)
        self._inv = None
        self.__dict__.pop("_AinvF", None)

    def solve(self, config: LinearSolverConfig = LinearSolverConfig()):
        """Newton update (full vector) and GMRES iteration count."""
        K, E = self.condense()
        res = solve_linear(K, E, config, block_ptr=self.disc.lam_offset,
                           block_key=self.disc.block_key())
        return self.reconstruct(res.x), res.iterations

    def _local_inverses(self):
        if self._inv is None:
            invs = []
            for g, J in zip(self.disc.groups, self.blocks):
                A = J[:, : g.nl, : g.nl]
                try:
                    inv = np.linalg.inv(A)
                except np.linalg.LinAlgError:
                    inv = None
                if inv is None or not np.all(np.isfinite(inv)):
                    for b in range(len(A)):
                        try:
                            ib = np.linalg.inv(A[b])
                        except np.linalg.LinAlgError:
                            raise LocalSolveError(int(g.elements[b])) from None
                        if not np.all(np.isfinite(ib)):
                            raise LocalSolveError(int(g.elements[b]))
                invs.append(inv)
            self._inv = invs
        return self._inv

    def element_blocks(self, K: int) -> dict:
        """Named sub-blocks of element K's Jacobian (Q rows/cols omitted if inviscid)."""
        disc = self.disc
        for g, J in zip(disc.groups, self.blocks):
            hit = np.flatnonzero(g.elements == K)
            if len(hit):
                Jk = J[hit[0]]
                nl, ws = g.nl, disc.w_start[K]
                q, w, t = slice(0, ws), slice(ws, nl), slice(nl, None)
                out = {"D": Jk[w, w], "S": Jk[w, t], "M": Jk[t, w], "N": Jk[t, t]}
                if ws:
                    out.update(A=Jk[q, q], B=Jk[q, w], C=Jk[w, q], R=Jk[q, t], L=Jk[t, q])
                return out
        raise IndexError(K)

    # -- assembled matrices ----------------------------------------------------
    def full_matrix(self) -> sp.csr_matrix:
        """Monolithic Jacobian over all unknowns (for checks and export)."""
        disc = self.disc
        rows, cols, vals = [], [], []
        for g, J in zip(disc.groups, self.blocks):
            gidx = np.concatenate([g.uidx, np.where(g.tmap >= 0, disc.n_local + g.tmap, -1)], axis=1)
            sgn = np.concatenate([np.ones_like(g.uidx, dtype=float), g.tsign], axis=1)
            Js = J * sgn[:, :, None] * sgn[:, None, :]
            ok = gidx >= 0
            for b in range(len(J)):
                i = gidx[b][ok[b]]
                Jb = Js[b][np.ix_(ok[b], ok[b])]
                rows.append(np.repeat(i, len(i)))
                cols.append(np.tile(i, len(i)))
                vals.append(Jb.ravel())
        n = disc.n_dof
        if not rows:
            return sp.csr_matrix((n, n))
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsr()

    def _scatter_matrix(self, mats):
        disc = self.disc
        rows, cols, vals = [], [], []
        for g, S in zip(disc.groups, mats):
            t = g.tmap
            Ss = S * g.tsign[:, :, None] * g.tsign[:, None, :]
            ok = t >= 0
            for b in range(len(S)):
                i = t[b][ok[b]]
                rows.append(np.repeat(i, len(i)))
                cols.append(np.tile(i, len(i)))
                vals.append(Ss[b][np.ix_(ok[b], ok[b])].ravel())
        n = disc.n_lambda
        if not rows or n == 0:
            return sp.csr_matrix((n, n))
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsr()

    def condense(self):
        """Condensed trace matrix K and right-hand side E for the Newton update."""
        disc = self.disc
        invs = self._local_inverses()
        mats = []
        E = np.zeros(disc.n_lambda)
        E -= self.r[disc.n_local:]
        self._AinvB, self._AinvF = [], []
        for g, J, inv in zip(disc.groups, self.blocks, invs):
            nl = g.nl
            Bt, C, N = J[:, :nl, nl:], J[:, nl:, :nl], J[:, nl:, nl:]
            F = -self.r[g.uidx]
            AinvB = inv @ Bt
            AinvF = np.einsum("bij,bj->bi", inv, F)
            self._AinvB.append(AinvB)
            self._AinvF.append(AinvF)
            mats.append(N - C @ AinvB)
            contrib = np.einsum("bij,bj->bi", C, AinvF) * g.tsign
            ok = g.tmap >= 0
            np.add.at(E, g.tmap[ok], -contrib[ok])
        return self._scatter_matrix(mats), E

    def condense_transpose(self):
        """K^T assembled from the transposed local systems."""
        mats = []
        for g, J, inv in zip(self.disc.groups, self.blocks, self._local_inverses()):
            nl = g.nl
            Bt, C, N = J[:, :nl, nl:], J[:, nl:, :nl], J[:, nl:, nl:]
            AinvT_CT = np.swapaxes(inv, 1, 2) @ np.swapaxes(C, 1, 2)
            mats.append(np.swapaxes(N, 1, 2) - np.swapaxes(Bt, 1, 2) @ AinvT_CT)
        return self._scatter_matrix(mats)

    def reconstruct(self, dlam) -> np.ndarray:
        """Full Newton update from the trace update."""
        disc = self.disc
        if not hasattr(self, "_AinvF"):
            self.condense()
        dx = np.zeros(disc.n_dof)
        dx[disc.n_local:] = dlam
        for g, AinvB, AinvF in zip(disc.groups, self._AinvB, self._AinvF):
            dl = _element_traces(g, dlam)
            dx[g.uidx] = AinvF - np.einsum("bij,bj->bi", AinvB, dl)
        return dx

    def transpose_rhs(self, g_full):
        """Condensed right-hand side for J^T z = g."""
        disc = self.disc
        E = np.array(g_full[disc.n_local:], dtype=float)
        for g, J, inv in zip(disc.groups, self.blocks, self._local_inverses()):
            nl = g.nl
            Bt = J[:, :nl, nl:]
            gu = g_full[g.uidx]
            y = np.einsum("bji,bj->bi", inv, gu)
            contrib = np.einsum("bji,bj->bi", Bt, y) * g.tsign
            ok = g.tmap >= 0
            np.add.at(E, g.tmap[ok], -contrib[ok])
        return E

    def transpose_reconstruct(self, g_full, zlam) -> np.ndarray:
        disc = self.disc
        z = np.zeros(disc.n_dof)
        z[disc.n_local:] = zlam
        for g, J, inv in zip(disc.groups, self.blocks, self._local_inverses()):
            nl = g.nl
            C = J[:, nl:, :nl]
            zl = _element_traces(g, zlam)
            rhs = g_full[g.uidx] - np.einsum("bji,bj->bi", C, zl)
            z[g.uidx] = np.einsum("bji,bj->bi", inv, rhs)
        return z
