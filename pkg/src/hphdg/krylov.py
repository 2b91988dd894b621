"""Restarted GMRES with an incomplete-LU preconditioner.

The fill pattern of ILU(n) is computed on the block graph (one node per
trace edge for HDG, per element for DG). The factorization works on dense
blocks and stores the inverses of the diagonal blocks (LU with partial
pivoting), so no pivoting is needed across blocks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee


class LinearSolverError(RuntimeError):
    pass


ORDERINGS = ("natural", "rcm", "streamwise")


@dataclass(frozen=True)
class LinearSolverConfig:
    restart: int = 60
    rtol: float = 1e-8
    max_iter: int = 2000
    fill_level: int = 0
    ordering: str = "natural"     # "natural", "rcm" or "streamwise"
    preconditioner: str = "ilu"  # "ilu" or "none"

    def __post_init__(self):
        if not 0 < self.rtol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.restart < 1 or self.max_iter < 1 or self.fill_level < 0:
            raise ValueError("invalid linear solver settings")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")
        if self.preconditioner not in ("ilu", "none"):
            raise ValueError("preconditioner must be 'ilu' or 'none'")


@dataclass
class LinearSolveResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


# ---------------------------------------------------------------------------
# Symbolic ILU(n) on the block graph
# ---------------------------------------------------------------------------

def block_pattern(A: sp.csr_matrix, block_ptr) -> sp.csr_matrix:
    """Boolean block-adjacency matrix of A for the partition ``block_ptr``."""
    block_ptr = np.asarray(block_ptr)
    owner = np.repeat(np.arange(len(block_ptr) - 1), np.diff(block_ptr))
    C = A.tocoo()
    nb = len(block_ptr) - 1
    G = sp.coo_matrix((np.ones(C.nnz), (owner[C.row], owner[C.col])), shape=(nb, nb)).tocsr()
    G = G + sp.identity(nb, format="csr")
    G.data[:] = 1.0
    G.sort_indices()
    return G


def symbolic_ilu(G: sp.csr_matrix, level: int) -> sp.csr_matrix:
    """Level-of-fill ILU(level) pattern of a structurally symmetric graph."""
    if level == 0:
        return G
    n = G.shape[0]
    rows_cols, rows_lev = [], []
    for i in range(n):
        lev = {int(j): 0 for j in G.indices[G.indptr[i]:G.indptr[i + 1]]}
        k_sorted = sorted(c for c in lev if c < i)
        done = set()
        while k_sorted:
            k = k_sorted.pop(0)
            if k in done:
                continue
            done.add(k)
            lik = lev[k]
            if lik >= level:
                continue
            for j, lkj in zip(rows_cols[k], rows_lev[k]):
                if j <= k:
                    continue
                new = lik + lkj + 1
                if new <= level and new < lev.get(j, level + 1):
                    if j not in lev and j < i:
                        k_sorted.append(j)
                        k_sorted.sort()
                    lev[j] = new
        cols = np.array(sorted(lev), dtype=np.int64)
        rows_cols.append(cols)
        rows_lev.append(np.array([lev[c] for c in cols]))
    indptr = np.concatenate([[0], np.cumsum([len(c) for c in rows_cols])])
    indices = np.concatenate(rows_cols)
    return sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(n, n))


# ---------------------------------------------------------------------------
# Numeric block factorization and triangular solves
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _block_positions(bptr, bind, row_block, col_block):
    out = np.empty(len(row_block), dtype=np.int64)
    for t in range(len(row_block)):
        i = row_block[t]
        lo, hi = bptr[i], bptr[i + 1]
        j = col_block[t]
        while lo < hi:
            mid = (lo + hi) // 2
            if bind[mid] < j:
                lo = mid + 1
            else:
                hi = mid
        out[t] = lo
    return out


@numba.njit(cache=True)
def _invert(D, out):
    """Gauss-Jordan inverse with partial pivoting; False if D is numerically singular."""
    s = D.shape[0]
    a = D.copy()
    inv = np.eye(s)
    scale = np.abs(D).max()
    if scale == 0.0:
        return False
    for c in range(s):
        piv = c
        for r in range(c + 1, s):
            if abs(a[r, c]) > abs(a[piv, c]):
                piv = r
        if abs(a[piv, c]) <= 1e-14 * scale:
            return False
        if piv != c:
            for k in range(s):
                a[c, k], a[piv, k] = a[piv, k], a[c, k]
                inv[c, k], inv[piv, k] = inv[piv, k], inv[c, k]
        d = 1.0 / a[c, c]
        for k in range(s):
            a[c, k] *= d
            inv[c, k] *= d
        for r in range(s):
            if r != c and a[r, c] != 0.0:
                f = a[r, c]
                for k in range(s):
                    a[r, k] -= f * a[c, k]
                    inv[r, k] -= f * inv[c, k]
    out[:, :] = inv
    return True


@numba.njit(cache=True)
def _bilu_factor(nb, bsz, bptr, bind, voff, vals, diag, doff, dinv):
    work = -np.ones(nb, dtype=np.int64)
    for i in range(nb):
        si = bsz[i]
        for p in range(bptr[i], bptr[i + 1]):
            work[bind[p]] = p
        for p in range(bptr[i], bptr[i + 1]):
            k = bind[p]
            if k >= i:
                break
            sk = bsz[k]
            # L_ik = A_ik D_k^-1
            tmp = np.zeros((si, sk))
            for a in range(si):
                for b in range(sk):
                    acc = 0.0
                    for c in range(sk):
                        acc += vals[voff[p] + a * sk + c] * dinv[doff[k] + c * sk + b]
                    tmp[a, b] = acc
            for a in range(si):
                for b in range(sk):
                    vals[voff[p] + a * sk + b] = tmp[a, b]
            for q in range(diag[k] + 1, bptr[k + 1]):
                j = bind[q]
                pos = work[j]
                if pos < 0:
                    continue
                sj = bsz[j]
                for a in range(si):
                    for b in range(sj):
                        acc = 0.0
                        for c in range(sk):
                            acc += tmp[a, c] * vals[voff[q] + c * sj + b]
                        vals[voff[pos] + a * sj + b] -= acc
        D = np.empty((si, si))
        for a in range(si):
            for b in range(si):
                D[a, b] = vals[voff[diag[i]] + a * si + b]
        Dinv = np.empty((si, si))
        if not _invert(D, Dinv):
            return i
        for a in range(si):
            for b in range(si):
                dinv[doff[i] + a * si + b] = Dinv[a, b]
        for p in range(bptr[i], bptr[i + 1]):
            work[bind[p]] = -1
    return -1


@numba.njit(cache=True)
def _bilu_solve(nb, bsz, rptr, bptr, bind, voff, vals, diag, doff, dinv, rhs):
    y = rhs.copy()
    for i in range(nb):
        si, ri = bsz[i], rptr[i]
        for p in range(bptr[i], diag[i]):
            k = bind[p]
            sk, rk = bsz[k], rptr[k]
            for a in range(si):
                acc = 0.0
                for c in range(sk):
                    acc += vals[voff[p] + a * sk + c] * y[rk + c]
                y[ri + a] -= acc
    x = np.empty_like(y)
    for i in range(nb - 1, -1, -1):
        si, ri = bsz[i], rptr[i]
        t = y[ri:ri + si].copy()
        for p in range(diag[i] + 1, bptr[i + 1]):
            j = bind[p]
            sj, rj = bsz[j], rptr[j]
            for a in range(si):
                acc = 0.0
                for c in range(sj):
                    acc += vals[voff[p] + a * sj + c] * x[rj + c]
                t[a] -= acc
        for a in range(si):
            acc = 0.0
            for c in range(si):
                acc += dinv[doff[i] + a * si + c] * t[c]
            x[ri + a] = acc
    return x


class BlockILU:
    """Block ILU(n): dense blocks on the level-n block pattern, inverted diagonal blocks."""

    def __init__(self, A: sp.csr_matrix, block_ptr=None, level: int = 0):
        A = sp.csr_matrix(A)
        n = A.shape[0]
        if block_ptr is None:
            block_ptr = np.arange(n + 1)
        block_ptr = np.asarray(block_ptr, dtype=np.int64)
        G = symbolic_ilu(block_pattern(A, block_ptr), level).tocsr()
        G.sort_indices()
        nb = G.shape[0]
        bsz = np.diff(block_ptr).astype(np.int64)
        bptr = G.indptr.astype(np.int64)
        bind = G.indices.astype(np.int64)
        rows_of = np.repeat(np.arange(nb), np.diff(bptr))
        sizes = bsz[rows_of] * bsz[bind]
        voff = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        vals = np.zeros(int(voff[-1]))
        C = A.tocoo()
        owner = np.repeat(np.arange(nb), bsz)
        bi, bj = owner[C.row], owner[C.col]
        pos = _block_positions(bptr, bind, bi.astype(np.int64), bj.astype(np.int64))
        loc = voff[pos] + (C.row - block_ptr[bi]) * bsz[bj] + (C.col - block_ptr[bj])
        np.add.at(vals, loc, C.data)
        diag = _block_positions(bptr, bind, np.arange(nb, dtype=np.int64), np.arange(nb, dtype=np.int64))
        doff = np.concatenate([[0], np.cumsum(bsz**2)]).astype(np.int64)
        dinv = np.zeros(int(doff[-1]))
        bad = _bilu_factor(nb, bsz, bptr, bind, voff, vals, diag, doff, dinv)
        if bad >= 0:
            raise LinearSolverError(f"singular pivot block {bad} in block ILU(n) "
                                    f"(rows {block_ptr[bad]}..{block_ptr[bad + 1] - 1})")
        self._args = (nb, bsz, block_ptr, bptr, bind, voff, vals, diag, doff, dinv)
        self.n = n
        self.block_nnz = int(voff[-1])

    def solve(self, b) -> np.ndarray:
        return _bilu_solve(*self._args, np.asarray(b, dtype=float))


ILU = BlockILU


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------

def gmres(A, b, M=None, x0=None, restart: int = 60, rtol: float = 1e-8,
          max_iter: int = 2000) -> LinearSolveResult:
    """Right-preconditioned restarted GMRES.

    Convergence is declared on the true residual ``||b - A x|| <= 2 rtol ||b||``
    after the Arnoldi estimate reaches ``rtol``.
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    matvec = A.dot if hasattr(A, "dot") else A
    prec = (lambda v: v) if M is None else (M.solve if hasattr(M, "solve") else M)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return LinearSolveResult(np.zeros(n), 0, 0.0, True)
    target = rtol * bnorm
    total = 0
    r = b - matvec(x)
    beta = np.linalg.norm(r)
    while total < max_iter:
        if beta <= 2.0 * target and total > 0:
            break
        m = min(restart, max_iter - total)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_used = 0
        for j in range(m):
            Z[j] = prec(V[j])
            w = matvec(Z[j])
            for i in range(j + 1):
                H[i, j] = np.dot(w, V[i])
                w = w - H[i, j] * V[i]
            # one reorthogonalization pass keeps the basis orthogonal at tight tolerances
            for i in range(j + 1):
                c = np.dot(w, V[i])
                H[i, j] += c
                w = w - c * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            breakdown = H[j + 1, j] <= 1e-14 * max(np.abs(H[: j + 1, j]).max(), 1e-300)
            if not breakdown:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = (1.0, 0.0) if denom == 0 else (H[j, j] / denom, H[j + 1, j] / denom)
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k_used = j + 1
            total += 1
            if abs(g[j + 1]) <= target or breakdown:
                break
        y = np.linalg.lstsq(np.triu(H[:k_used, :k_used]), g[:k_used], rcond=None)[0]
        x = x + y @ Z[:k_used]
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if beta <= 2.0 * target:
            return LinearSolveResult(x, total, beta / bnorm, True)
        if k_used == 0:
            break
    return LinearSolveResult(x, total, beta / bnorm, beta <= 2.0 * target)


def solve_linear(A, b, config: LinearSolverConfig = LinearSolverConfig(), block_ptr=None,
                 x0=None, raise_on_fail: bool = True, block_key=None) -> LinearSolveResult:
    """GMRES on A x = b with the configured preconditioner and ordering.

    ``block_key`` (one value per block) drives the streamwise ordering: blocks
    are factored in ascending key order, i.e. from upstream to downstream when
    the key is the position along the flow direction.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if n == 0:
        return LinearSolveResult(np.zeros(0), 0, 0.0, True)
    if A.shape[1] != n:
        raise ValueError("square system required")
    if block_ptr is None:
        block_ptr = np.arange(n + 1)
    perm = None
    bperm = None
    if config.ordering == "rcm":
        bperm = reverse_cuthill_mckee(block_pattern(A, block_ptr), symmetric_mode=True)
    elif config.ordering == "streamwise":
        if block_key is None:
            raise ValueError("streamwise ordering needs a key per block")
        bperm = np.argsort(np.asarray(block_key), kind="stable")
    if bperm is not None:
        sizes = np.diff(block_ptr)
        perm = np.concatenate([np.arange(block_ptr[k], block_ptr[k + 1]) for k in bperm])
        block_ptr = np.concatenate([[0], np.cumsum(sizes[bperm])])
        A = A[perm][:, perm]
        b = np.asarray(b)[perm]
        x0 = None if x0 is None else np.asarray(x0)[perm]
    M = BlockILU(A, block_ptr, config.fill_level) if config.preconditioner == "ilu" else None
    res = gmres(A, b, M, x0=x0, restart=config.restart, rtol=config.rtol, max_iter=config.max_iter)
    if perm is not None:
        x = np.empty(n)
        x[perm] = res.x
        res = LinearSolveResult(x, res.iterations, res.residual, res.converged)
    if raise_on_fail and not res.converged:
        raise LinearSolverError(
            f"GMRES did not reach rtol={config.rtol:g} in {res.iterations} iterations "
            f"(relative residual {res.residual:.3e})")
    return res
