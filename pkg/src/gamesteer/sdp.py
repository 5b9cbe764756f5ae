"""First-order operator-splitting solver for small dense SDPs.

Standard form handled here:

    min  c' x   s.t.  A x = b,   x in K,

where x stacks the scaled-symmetric vectorizations (svec) of a list of PSD
blocks followed by free scalar variables.  Off-diagonal svec entries carry a
sqrt(2) factor so the Euclidean inner product of vectorizations equals the
trace inner product of the matrices.

The splitting alternates an equality-constrained least-squares step (cached
sparse factorization of A A', independent of the penalty parameter) with a
projection onto the cone, with over-relaxation and residual-balancing penalty
updates.  Good to ~1e-7 accuracy, which is all the certificate pipeline needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SQRT2 = math.sqrt(2.0)


class EigenFailure(RuntimeError):
    pass


def tri_size(k: int) -> int:
    return k * (k + 1) // 2


_svec_cache: dict = {}


def _svec_plan(k: int):
    """Cached (rows, cols, pack_scale, unpack_scale) for svec of a k x k block."""
    plan = _svec_cache.get(k)
    if plan is None:
        rows, cols = np.triu_indices(k)
        off = rows != cols
        pack = np.where(off, SQRT2, 1.0)
        plan = (rows, cols, pack, 1.0 / pack)
        _svec_cache[k] = plan
    return plan


def svec(M: np.ndarray) -> np.ndarray:
    k = M.shape[0]
    rows, cols, pack, _ = _svec_plan(k)
    return M[rows, cols] * pack


def smat(v: np.ndarray, k: int) -> np.ndarray:
    rows, cols, _, unpack = _svec_plan(k)
    M = np.zeros((k, k))
    M[rows, cols] = v * unpack
    M[cols, rows] = M[rows, cols]
    return M


def project_psd(M: np.ndarray) -> np.ndarray:
    """Project a (defensively symmetrized) matrix onto the PSD cone."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("project_psd expects a square matrix")
    S = 0.5 * (M + M.T)
    try:
        w, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise EigenFailure("eigendecomposition did not converge") from exc
    if w[0] >= 0.0:
        return S
    wp = np.clip(w, 0.0, None)
    return (V * wp) @ V.T


@dataclass
class SdpProblem:
    """Block-PSD + free-variable SDP in the svec standard form above."""

    blocks: List[int]
    free_dim: int
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        n = self.n_vars
        if self.A.shape != (len(self.b), n):
            raise ValueError(f"A has shape {self.A.shape}, expected ({len(self.b)}, {n})")
        if len(self.c) != n:
            raise ValueError("objective length mismatch")

    @property
    def n_vars(self) -> int:
        return sum(tri_size(k) for k in self.blocks) + self.free_dim

    def block_slices(self) -> List[slice]:
        out, start = [], 0
        for k in self.blocks:
            out.append(slice(start, start + tri_size(k)))
            start += tri_size(k)
        return out

    @property
    def free_slice(self) -> slice:
        start = sum(tri_size(k) for k in self.blocks)
        return slice(start, start + self.free_dim)

    def dump(self, path: str):
        """Block-sparse triplet text dump for cross-checking with other solvers."""
        A = self.A.tocoo()
        with open(path, "w") as fh:
            fh.write(f"blocks {' '.join(str(k) for k in self.blocks)}\n")
            fh.write(f"free {self.free_dim}\n")
            fh.write(f"m {len(self.b)}\n")
            fh.write("b\n")
            for v in self.b:
                fh.write(f"{v!r}\n")
            fh.write("c\n")
            for i in np.nonzero(self.c)[0]:
                fh.write(f"{i} {self.c[i]!r}\n")
            fh.write("A\n")
            for i, j, v in zip(A.row, A.col, A.data):
                fh.write(f"{i} {j} {v!r}\n")


@dataclass
class SolveOptions:
    tol: float = 1e-7
    max_iters: int = 200_000
    rho: float = 1.0
    over_relax: float = 1.5
    check_every: int = 25
    adapt_every: int = 50
    accel_memory: int = 10   # Anderson acceleration history (0 disables)
    accel_every: int = 5
    verbose: bool = False


@dataclass
class SdpSolution:
    blocks: List[np.ndarray]
    free: np.ndarray
    dual: np.ndarray
    dual_slack: np.ndarray
    status: str                      # Solved | MaxIters | Infeasible-suspect
    residuals: Tuple[float, float, float]
    iterations: int
    objective: float

    def stacked_primal(self, prob: SdpProblem) -> np.ndarray:
        parts = [svec(B) for B in self.blocks]
        parts.append(self.free)
        return np.concatenate(parts) if parts else np.zeros(0)


def _project_cone(x: np.ndarray, blocks: Sequence[int], slices: Sequence[slice],
                  free_sl: slice) -> np.ndarray:
    z = x.copy()
    for k, sl in zip(blocks, slices):
        z[sl] = svec(project_psd(smat(x[sl], k)))
    return z


def _residuals(A, b, c, z, y, s, norm_b, norm_c) -> Tuple[float, float, float]:
    prim = np.linalg.norm(A @ z - b) / (1.0 + norm_b)
    dual = np.linalg.norm(c - A.T @ y - s) / (1.0 + norm_c)
    pobj = float(c @ z)
    dobj = float(b @ y)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return prim, dual, gap


def residuals(prob: SdpProblem, sol: SdpSolution) -> Tuple[float, float, float]:
    """Standard conic residuals of a candidate solution, by definition."""
    z = sol.stacked_primal(prob)
    return _residuals(prob.A, prob.b, prob.c, z, sol.dual, sol.dual_slack,
                      np.linalg.norm(prob.b), np.linalg.norm(prob.c))


def _equilibrate(prob: SdpProblem):
    """Ruiz equilibration. Rows scale freely; columns must scale uniformly
    within each PSD block (uniform positive scaling preserves the cone),
    while free variables scale individually.  Returns the scaled data plus
    the diagonal and scalar factors needed to map solutions back:
    x = b_scale * e_col * x', y = c_scale * d_row * y', s = c_scale * s'/e_col.
    """
    n = prob.n_vars
    m = len(prob.b)
    blocks = prob.blocks
    slices = prob.block_slices()
    free_sl = prob.free_slice
    group = np.empty(n, dtype=int)
    for gi, sl in enumerate(slices):
        group[sl] = gi
    group[free_sl] = len(blocks) + np.arange(prob.free_dim)
    n_groups = len(blocks) + prob.free_dim
    d_row = np.ones(m)
    e_col = np.ones(n)
    A = prob.A.tocsr().astype(float)
    for _ in range(10):
        Aabs = abs(A)
        r = np.sqrt(Aabs.max(axis=1).toarray().ravel())
        r[r == 0] = 1.0
        cmax = np.asarray(Aabs.max(axis=0).todense()).ravel()
        gmax = np.zeros(n_groups)
        np.maximum.at(gmax, group, cmax)
        cg = np.sqrt(gmax[group])
        cg[cg == 0] = 1.0
        A = sp.diags(1.0 / r) @ A @ sp.diags(1.0 / cg)
        d_row /= r
        e_col /= cg
        if abs(r - 1.0).max() < 1e-3 and abs(cg - 1.0).max() < 1e-3:
            break
    A = A.tocsr()
    b = d_row * prob.b
    c = e_col * prob.c
    b_scale = max(1e-8, np.linalg.norm(b))
    c_scale = max(1e-8, np.linalg.norm(c))
    return A, b / b_scale, c / c_scale, d_row, e_col, b_scale, c_scale


def solve(prob: SdpProblem, opts: Optional[SolveOptions] = None) -> SdpSolution:
    """Run the splitting iteration until residual convergence or the cap."""
    opts = opts or SolveOptions()
    n = prob.n_vars
    m = len(prob.b)
    blocks = prob.blocks
    slices = prob.block_slices()
    free_sl = prob.free_slice

    if m == 0 or n == 0:
        z = np.zeros(n)
        return SdpSolution([np.zeros((k, k)) for k in blocks], np.zeros(prob.free_dim),
                           np.zeros(m), np.zeros(n), "Solved", (0.0, 0.0, 0.0), 0, 0.0)

    A, b, c, d_row, e_col, b_scale, c_scale = _equilibrate(prob)
    norm_b0 = np.linalg.norm(prob.b)
    norm_c0 = np.linalg.norm(prob.c)

    AAt = (A @ A.T).tocsc()
    reg = 1e-10 * (1.0 + AAt.diagonal().mean())
    lu = spla.splu(AAt + reg * sp.identity(m, format="csc"))
    At = A.T.tocsr()

    def eq_solve(rhs: np.ndarray) -> np.ndarray:
        nu = lu.solve(rhs)
        nu += lu.solve(rhs - AAt @ nu)  # one refinement step
        return nu

    rho = opts.rho
    alpha = opts.over_relax

    def step(state: np.ndarray, rho: float):
        """One splitting iteration on the stacked (z, u) state."""
        z0 = state[:n]
        u0 = state[n:]
        w = z0 - u0
        nu = eq_solve(rho * (A @ w - b) - A @ c)
        x = w - (c + At @ nu) / rho
        xh = alpha * x + (1.0 - alpha) * z0
        z_new = _project_cone(xh + u0, blocks, slices, free_sl)
        u_new = u0 + xh - z_new
        return np.concatenate([z_new, u_new]), x, -nu

    state = np.zeros(2 * n)
    y = np.zeros(m)
    status = "MaxIters"
    res = (np.inf, np.inf, np.inf)
    it = 0
    prim_hist: List[float] = []
    f_hist: List[np.ndarray] = []
    g_hist: List[np.ndarray] = []

    while it < opts.max_iters:
        it += 1
        z_prev = state[:n]
        new_state, x, y = step(state, rho)
        g = new_state - state
        if opts.accel_memory:
            f_hist.append(new_state)
            g_hist.append(g)
            if len(f_hist) > opts.accel_memory:
                f_hist.pop(0)
                g_hist.pop(0)
        state = new_state
        # Anderson acceleration: combine recent fixed-point iterates and keep
        # the candidate only if it shrinks the fixed-point residual
        if (opts.accel_memory and it % opts.accel_every == 0
                and len(g_hist) >= 3 and it < opts.max_iters):
            G = np.stack(g_hist, axis=1)
            M = G.T @ G
            M = M + (1e-12 * (np.trace(M) + 1.0)) * np.eye(M.shape[0])
            try:
                theta = np.linalg.solve(M, np.ones(M.shape[0]))
            except np.linalg.LinAlgError:
                theta = None
            if theta is not None and abs(theta.sum()) > 1e-12:
                theta /= theta.sum()
                cand = np.stack(f_hist, axis=1) @ theta
                it += 1
                cand_next, xc, yc = step(cand, rho)
                g_cand = cand_next - cand
                if np.linalg.norm(g_cand) < np.linalg.norm(g):
                    state = cand_next
                    x, y = xc, yc
                    f_hist.append(cand_next)
                    g_hist.append(g_cand)
                    if len(f_hist) > opts.accel_memory:
                        f_hist.pop(0)
                        g_hist.pop(0)
        z = state[:n]
        u = state[n:]
        dz = np.linalg.norm(z - z_prev)

        if it % opts.check_every <= 1 or it >= opts.max_iters:
            x_orig = b_scale * e_col * z
            s_orig = c_scale * (-rho * u) / e_col
            y_orig = c_scale * d_row * y
            res = _residuals(prob.A, prob.b, prob.c, x_orig, y_orig, s_orig,
                             norm_b0, norm_c0)
            if opts.verbose and it % (opts.check_every * 40) <= 1:
                print(f"  iter {it}: prim {res[0]:.2e} dual {res[1]:.2e} gap {res[2]:.2e} rho {rho:.1e}")
            if max(res) <= opts.tol:
                status = "Solved"
                break
            prim_hist.append(res[0])
            if _looks_infeasible(A, b, y, blocks, slices, free_sl, prim_hist, opts.tol):
                status = "Infeasible-suspect"
                break

        if it % opts.adapt_every <= 1:
            prim_r = np.linalg.norm(x - z)
            dual_r = rho * dz
            changed = False
            if prim_r > 10.0 * dual_r and rho < 1e6:
                rho *= 2.0
                u /= 2.0   # u is a view into state
                changed = True
            elif dual_r > 10.0 * prim_r and rho > 1e-6:
                rho /= 2.0
                u *= 2.0
                changed = True
            if changed:
                f_hist.clear()
                g_hist.clear()

    x_orig = b_scale * e_col * z
    s_orig = c_scale * (-rho * u) / e_col
    y_orig = c_scale * d_row * y
    res = _residuals(prob.A, prob.b, prob.c, x_orig, y_orig, s_orig, norm_b0, norm_c0)
    if status != "Infeasible-suspect" and max(res) <= opts.tol:
        status = "Solved"

    mats = [smat(x_orig[sl], k) for k, sl in zip(blocks, slices)]
    return SdpSolution(mats, x_orig[free_sl].copy(), y_orig, s_orig, status, res, it,
                       float(prob.c @ x_orig))


def _looks_infeasible(A, b, y, blocks, slices, free_sl, prim_hist: List[float],
                      tol: float) -> bool:
    """Farkas-style check: -A'y in K* with b'y > 0 certifies primal infeasibility.

    Only consulted once the primal residual has clearly stalled far from
    feasibility, so slow feasible instances are not misclassified.
    """
    if len(prim_hist) < 40:
        return False
    recent, older = prim_hist[-1], prim_hist[-40]
    if recent <= 1e3 * tol or recent < 0.98 * older:
        return False
    ny = np.linalg.norm(y)
    if ny < 1e-8:
        return False
    yhat = y / ny
    if float(b @ yhat) <= 1e-6:
        return False
    p = -(A.T @ yhat)
    dist2 = float(np.linalg.norm(p[free_sl]) ** 2)
    for k, sl in zip(blocks, slices):
        M = smat(p[sl], k)
        dist2 += float(np.linalg.norm(M - project_psd(M)) ** 2)
    return math.sqrt(dist2) <= 1e-4


# ---------------------------------------------------------------------------
# Interior-point backend.
#
# The splitting solver above is kept as the cheap default for small and
# well-conditioned problems, but certificate extraction for the fitting
# pipeline needs 1e-8-level accuracy on problems whose optimal Gram matrices
# are singular, where first-order methods stall.  This backend is a primal-dual
# path-following method with Nesterov-Todd scaling.  The Schur complement is
# assembled and factorized per "row group": constraint rows that share no PSD
# block decouple, so the normal matrix is block diagonal up to a border of
# free-variable columns and rows that touch no cone variable.
# ---------------------------------------------------------------------------

import scipy.linalg as sla


@dataclass
class IpmOptions:
    tol: float = 1e-8
    max_iters: int = 100
    tau: float = 0.98          # fraction-to-boundary step damping
    corrector: bool = True
    row_orth: bool = True      # orthonormalize constraint rows per Schur group
    dir_tol: float = 1e-2      # stop when Newton directions get this inaccurate
    warm_pad: float = 1e-3     # interior re-centering pad for warm restarts
    verbose: bool = False


class _RowGroup:
    """Rows coupled through shared PSD blocks, with per-block svec data."""

    def __init__(self, rows: np.ndarray):
        self.rows = rows
        self.block_ids: List[int] = []
        self.subs: List[sp.csr_matrix] = []      # rows x tri(nb), block columns
        self.entries: List[tuple] = []           # (eptr, P, Q, V, Rscat) matrix entries
        self.Ti: Optional[np.ndarray] = None     # row-space orthonormalizer


def _block_row_entries(sub: sp.csr_matrix, k: int):
    """Matrix-entry view (eptr, P, Q, V) of svec rows: smat(row) = sum V e_P e_Q'."""
    tri_r, tri_c, _, unpack = _svec_plan(k)
    cols = sub.indices
    vals = sub.data * unpack[cols]
    r_, c_ = tri_r[cols], tri_c[cols]
    off = r_ != c_
    rep = np.where(off, 2, 1)
    cum = np.concatenate(([0], np.cumsum(rep)))
    eptr = cum[sub.indptr]
    total = cum[-1]
    P = np.empty(total, dtype=np.int32)
    Q = np.empty(total, dtype=np.int32)
    V = np.empty(total)
    starts = cum[:-1]
    P[starts], Q[starts], V[starts] = r_, c_, vals
    so = starts[off] + 1
    P[so], Q[so], V[so] = c_[off], r_[off], vals[off]
    nr = sub.shape[0]
    Rscat = sp.csr_matrix((V, np.arange(total, dtype=np.int64), eptr),
                          shape=(nr, total))
    return eptr, P, Q, V, Rscat


def _nt_scaling(X: np.ndarray, S: np.ndarray):
    """NT scaling point W (W S W = X) plus S^{-1}, by symmetric eigensolves."""
    ws, Us = np.linalg.eigh(S)
    ws = np.clip(ws, 1e-14 * max(ws[-1], 1.0), None)
    Sh = (Us * np.sqrt(ws)) @ Us.T
    Sih = (Us / np.sqrt(ws)) @ Us.T
    Sinv = (Us / ws) @ Us.T
    M1 = Sh @ X @ Sh
    M1 = 0.5 * (M1 + M1.T)
    wm, Um = np.linalg.eigh(M1)
    wm = np.clip(wm, 1e-14 * max(wm[-1], 1.0), None)
    W = Sih @ ((Um * np.sqrt(wm)) @ Um.T) @ Sih
    return 0.5 * (W + W.T), Sinv


def _max_step(M: np.ndarray, dM: np.ndarray) -> float:
    """Largest a with M + a dM PSD, for (near-)PD M (inf if dM is PSD)."""
    w, U = np.linalg.eigh(M)
    w = np.clip(w, 1e-15 * max(abs(w[-1]), 1.0), None)
    Ri = U / np.sqrt(w)
    lam = float(np.linalg.eigvalsh(Ri.T @ dM @ Ri)[0])
    return math.inf if lam >= -1e-14 else -1.0 / lam


def _step_len(Ms: List[np.ndarray], dMs: List[np.ndarray], tau: float) -> float:
    """Fraction-to-boundary step with a cholesky-verified backtrack."""
    a = min(1.0, tau * min(_max_step(Mb, dMb) for Mb, dMb in zip(Ms, dMs)))
    for _ in range(60):
        ok = True
        for Mb, dMb in zip(Ms, dMs):
            try:
                np.linalg.cholesky(Mb + a * dMb)
            except np.linalg.LinAlgError:
                ok = False
                break
        if ok:
            return a
        a *= 0.8
    return 0.0


def solve_ipm(prob: SdpProblem, opts: Optional[IpmOptions] = None,
              init: Optional[Tuple[List[np.ndarray], np.ndarray,
                                   List[np.ndarray], np.ndarray]] = None
              ) -> SdpSolution:
    """Path-following interior-point solve of the same standard form.

    Returns the same SdpSolution structure as solve().  Built for the
    certificate problems: feasible, bounded, moderate row counts per group.
    """
    opts = opts or IpmOptions()
    blocks = prob.blocks
    slices = prob.block_slices()
    free_sl = prob.free_slice
    m = len(prob.b)
    n = prob.n_vars
    ncone = n - prob.free_dim
    nf = prob.free_dim
    if m == 0 or n == 0 or not blocks:
        # No cone part: fall back to the splitting solver (pure LP-ish corner).
        return solve(prob)

    # No Ruiz equilibration here: the per-group row orthonormalization below
    # normalizes the rows, and rescaling the cone columns distorts the central
    # path enough to stall small epigraph problems.
    A = prob.A.tocsr()
    b = prob.b.copy()
    c = prob.c.copy()
    At = A.T.tocsr()
    A_csc = A.tocsc()
    norm_b0 = np.linalg.norm(prob.b)
    norm_c0 = np.linalg.norm(prob.c)

    # --- row grouping via shared blocks (union-find over block ids) ---
    parent = list(range(len(blocks)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    block_rows = []
    for sl in slices:
        j0, j1 = sl.start, sl.stop
        idx = A_csc.indices[A_csc.indptr[j0]:A_csc.indptr[j1]]
        block_rows.append(np.unique(idx))
    row_owner = np.full(m, -1, dtype=int)
    for bi, rows in enumerate(block_rows):
        for r in rows:
            if row_owner[r] == -1:
                row_owner[r] = bi
            else:
                ra, rb = find(bi), find(row_owner[r])
                if ra != rb:
                    parent[ra] = rb
    group_of_block = [find(bi) for bi in range(len(blocks))]
    groups: dict = {}
    for bi in range(len(blocks)):
        g = group_of_block[bi]
        groups.setdefault(g, []).append(bi)
    q_rows = np.nonzero(row_owner == -1)[0]

    # Per-group row orthonormalization.  With A A' = I inside each group the
    # Schur complement's conditioning is set by the cone scaling alone instead
    # of being multiplied by the constraint matrix's squared conditioning,
    # which buys several orders of accuracy before the normal equations
    # saturate in double precision.
    # The orthonormalizer is applied as a congruence around each group's Schur
    # factorization (factor Ti Mg Ti', solve through Ti), so A itself stays
    # sparse and all residual arithmetic stays in original row coordinates.
    A_free = A_csc[:, free_sl].tocsr() if nf else sp.csr_matrix((m, 0))
    A_csr = A.tocsr()
    row_groups: List[_RowGroup] = []
    for g, bids in sorted(groups.items()):
        rows = np.unique(np.concatenate([block_rows[bi] for bi in bids]))
        if rows.size == 0:
            continue
        rg = _RowGroup(rows)
        for bi in bids:
            sub = A_csc[:, slices[bi]].tocsr()[rows]
            rg.block_ids.append(bi)
            rg.subs.append(sub)
            rg.entries.append(_block_row_entries(sub, blocks[bi]))
        if opts.row_orth:
            GG = (A_csr[rows] @ A_csr[rows].T).toarray()
            dg = np.diag_indices_from(GG)
            GG[dg] += 1e-12 * max(float(GG[dg].max(initial=0.0)), 1.0)
            try:
                L = sla.cholesky(GG, lower=True, check_finite=False)
                rg.Ti = sla.solve_triangular(L, np.eye(rows.size), lower=True,
                                             check_finite=False)
            except np.linalg.LinAlgError:
                rg.Ti = None
        else:
            rg.Ti = None
        row_groups.append(rg)

    A_cone = A_csc[:, :ncone].tocsr()
    BQ = A_free[q_rows].toarray() if nf else np.zeros((len(q_rows), 0))
    nq = len(q_rows)

    # --- interior starting point ---
    scale = 10.0 * max(1.0, float(np.max(np.abs(b), initial=0.0)),
                       float(np.max(np.abs(c), initial=0.0)))
    if init is not None:
        # Warm restart: push the supplied iterate into the interior and
        # re-center.  y is in original row coordinates.
        X0, xf0, S0, y0 = init
        X, S = [], []
        pf = opts.warm_pad
        for k, Xb, Sb in zip(blocks, X0, S0):
            wX = np.linalg.eigvalsh(0.5 * (Xb + Xb.T))
            wS = np.linalg.eigvalsh(0.5 * (Sb + Sb.T))
            padX = pf * max(1.0, wX[-1]) + max(0.0, -1.5 * wX[0])
            padS = pf * max(1.0, wS[-1]) + max(0.0, -1.5 * wS[0])
            X.append(0.5 * (Xb + Xb.T) + padX * np.eye(k))
            S.append(0.5 * (Sb + Sb.T) + padS * np.eye(k))
        xf = np.asarray(xf0, dtype=float).copy()
        y = np.asarray(y0, dtype=float).copy()
    else:
        X = [scale * np.eye(k) for k in blocks]
        S = [scale * np.eye(k) for k in blocks]
        xf = np.zeros(nf)
        y = np.zeros(m)
    ntot = sum(blocks)

    def stack_x():
        parts = [svec(M) for M in X]
        parts.append(xf)
        return np.concatenate(parts)

    def stack_s():
        parts = [svec(M) for M in S]
        parts.append(np.zeros(nf))
        return np.concatenate(parts)

    status = "MaxIters"
    it = 0
    res = (math.inf, math.inf, math.inf)
    best = None
    best_val = math.inf
    best_it = 0
    for it in range(1, opts.max_iters + 1):
        x = stack_x()
        s = stack_s()
        r_p = b - A @ x
        r_d = c - At @ y - s
        # Stopping is judged on the original (unscaled) problem.
        x_orig = x
        s_orig = s
        y_orig = y
        res = _residuals(prob.A, prob.b, prob.c, x_orig, y_orig, s_orig,
                         norm_b0, norm_c0)
        if opts.verbose:
            print(f"ipm it {it:3d} prim {res[0]:.2e} dual {res[1]:.2e} gap {res[2]:.2e}")
        if max(res) < best_val:
            best_val = max(res)
            best_it = it
            best = (x_orig, s_orig, y_orig, res)
        if max(res) <= opts.tol:
            status = "Solved"
            break
        if it - best_it > 12:
            break  # stalled near the numerical floor; keep the best iterate
        if math.isfinite(best_val) and max(res) > 1e2 * best_val:
            break  # diverging; keep the best iterate

        mu = sum(float(np.sum(Xb * Sb)) for Xb, Sb in zip(X, S)) / ntot
        Ws, Sinvs = [], []
        for Xb, Sb in zip(X, S):
            W, Sinv = _nt_scaling(Xb, Sb)
            Ws.append(W)
            Sinvs.append(Sinv)

        # Schur blocks per group, plus border pieces.
        gsolvers, Ys = [], []
        Sff = np.zeros((nf, nf))
        for rg in row_groups:
            nr = rg.rows.size
            Mg = np.zeros((nr, nr))
            for bi, sub, (eptr, P, Q, V, Rscat) in zip(rg.block_ids, rg.subs,
                                                       rg.entries):
                k = blocks[bi]
                W = Ws[bi]
                tri_r, tri_c, pack, _ = _svec_plan(k)
                # Row i of T is svec(W M_i W) with M_i the smat of A's row i on
                # this block; expanded per matrix entry and gathered by Rscat.
                TK = (W[tri_r][:, P].T * W[Q][:, tri_c]) * pack
                T = Rscat @ TK
                Mg += sub @ T.T
            # Factor the (optionally row-orthonormalized) Schur block.  The
            # congruence Ti Mg Ti' keeps the factorization well conditioned
            # while all residual arithmetic stays in original row coordinates.
            Ti = rg.Ti
            if Ti is not None:
                Mg = Ti @ Mg @ Ti.T
            Mg = 0.5 * (Mg + Mg.T)
            dg = np.diag_indices_from(Mg)
            jitter = 1e-13 * (1.0 + np.trace(Mg) / nr)
            Mg[dg] += jitter
            for _ in range(8):
                try:
                    cf = sla.cho_factor(Mg, lower=True, check_finite=False)
                    break
                except np.linalg.LinAlgError:
                    # Rank-deficient rows can leave the Schur block marginally
                    # indefinite; retry with a stronger diagonal shift.
                    Mg[dg] += jitter * (1e3 - 1.0)
                    jitter *= 1e3
            else:
                raise np.linalg.LinAlgError("Schur block not factorizable")

            if Ti is None:
                def gsolve(r, cf=cf):
                    return sla.cho_solve(cf, r, check_finite=False)
            else:
                def gsolve(r, cf=cf, Ti=Ti):
                    return Ti.T @ sla.cho_solve(cf, Ti @ r, check_finite=False)
            gsolvers.append(gsolve)
            if nf:
                Bg = A_free[rg.rows].toarray()
                Yg = gsolve(Bg)
                Sff += Bg.T @ Yg
                Ys.append((Bg, Yg))
            else:
                Ys.append((np.zeros((nr, 0)), np.zeros((nr, 0))))

        nb_border = nf + nq
        D = np.zeros((nb_border, nb_border))
        if nf:
            D[:nf, :nf] = -Sff
        if nq and nf:
            D[:nf, nf:] = BQ.T
            D[nf:, :nf] = BQ
        if nb_border:
            Dlu = sla.lu_factor(D, check_finite=False)

        r_dK = r_d[:ncone]
        r_df = r_d[free_sl]

        def apply_E(v: np.ndarray) -> np.ndarray:
            out = np.empty_like(v)
            for k, sl, W in zip(blocks, slices, Ws):
                out[sl] = svec(W @ smat(v[sl], k) @ W)
            return out

        def lin_solve(rhat: np.ndarray, rdf: np.ndarray):
            """One pass of the factored normal-equations solve."""
            rhs_f = rdf.copy() if nf else np.zeros(0)
            for rg, (Bg, Yg) in zip(row_groups, Ys):
                if nf:
                    rhs_f -= Yg.T @ rhat[rg.rows]
            dy = np.zeros(m)
            if nb_border:
                rhs = np.concatenate([rhs_f, rhat[q_rows]])
                sol = sla.lu_solve(Dlu, rhs, check_finite=False)
                dxf = sol[:nf]
                dy[q_rows] = sol[nf:]
            else:
                dxf = np.zeros(0)
            for rg, gsolve, (Bg, Yg) in zip(row_groups, gsolvers, Ys):
                dy_g = gsolve(rhat[rg.rows])
                if nf:
                    dy_g -= Yg @ dxf
                dy[rg.rows] = dy_g
            return dy, dxf

        def solve_direction(rc: np.ndarray):
            # rc is the stacked cone-space complementarity right-hand side.
            rhat = r_p - A_cone @ (rc - apply_E(r_dK))
            rhat_norm = 1e-30 + np.linalg.norm(rhat)
            dy, dxf = lin_solve(rhat, r_df)
            # Iterative refinement: the Schur factorizations get ill
            # conditioned as mu -> 0 and the raw solve loses digits.
            rel = math.inf
            ddy = ddxf = None
            for _ in range(5):
                res1 = rhat - A_cone @ apply_E(A_cone.T @ dy)
                if nf:
                    res1 -= A_free @ dxf
                    res2 = r_df - A_free.T @ dy
                else:
                    res2 = np.zeros(0)
                rel_new = np.linalg.norm(res1) / rhat_norm
                if rel_new > rel and ddy is not None:
                    # The last pass made things worse; undo it.
                    dy -= ddy
                    dxf -= ddxf
                    break
                stalled = rel_new >= 0.5 * rel
                rel = rel_new
                if stalled or rel < 1e-10:
                    break
                ddy, ddxf = lin_solve(res1, res2)
                dy += ddy
                dxf += ddxf
            if opts.verbose:
                print(f"    dir resid {rel:.2e}")
            ds_K = r_dK - A_cone.T @ dy
            dx_K = rc - apply_E(ds_K)
            return dy, dxf, dx_K, ds_K, rel

        # Affine (predictor) direction.
        rc_aff = np.concatenate([svec(-Xb) for Xb in X])
        dy_a, dxf_a, dxK_a, dsK_a, rel_a = solve_direction(rc_aff)
        dX_a = [smat(dxK_a[sl], k) for k, sl in zip(blocks, slices)]
        dS_a = [smat(dsK_a[sl], k) for k, sl in zip(blocks, slices)]
        ap = _step_len(X, dX_a, opts.tau)
        ad = _step_len(S, dS_a, opts.tau)
        mu_aff = sum(float(np.sum((Xb + ap * dXb) * (Sb + ad * dSb)))
                     for Xb, dXb, Sb, dSb in zip(X, dX_a, S, dS_a)) / ntot
        sigma = min(1.0, max(1e-8, (max(mu_aff, 0.0) / mu) ** 3))

        # Combined (centering + optional second-order corrector) direction.
        parts = []
        for Xb, Sinv, dXb, dSb in zip(X, Sinvs, dX_a, dS_a):
            R = sigma * mu * Sinv - Xb
            if opts.corrector:
                C = dXb @ dSb @ Sinv
                R = R - 0.5 * (C + C.T)
            parts.append(svec(R))
        rc = np.concatenate(parts)
        dy, dxf, dxK, dsK, rel_c = solve_direction(rc)
        if max(rel_a, rel_c) > opts.dir_tol:
            # The Schur factorization no longer supports an accurate Newton
            # direction; a long step from here corrupts feasibility, so stop
            # on the best iterate instead.
            break
        dX = [smat(dxK[sl], k) for k, sl in zip(blocks, slices)]
        dS = [smat(dsK[sl], k) for k, sl in zip(blocks, slices)]
        ap = _step_len(X, dX, opts.tau)
        ad = _step_len(S, dS, opts.tau)

        X = [0.5 * ((Xb + ap * dXb) + (Xb + ap * dXb).T) for Xb, dXb in zip(X, dX)]
        S = [0.5 * ((Sb + ad * dSb) + (Sb + ad * dSb).T) for Sb, dSb in zip(S, dS)]
        xf = xf + ap * dxf
        y = y + ad * dy

    if best is not None:
        x_orig, s_orig, y_orig, res = best
    else:
        x_orig = stack_x()
        s_orig = stack_s()
        y_orig = y
        res = _residuals(prob.A, prob.b, prob.c, x_orig, y_orig, s_orig,
                         norm_b0, norm_c0)
    if max(res) <= opts.tol:
        status = "Solved"
    mats = [smat(x_orig[sl], k) for k, sl in zip(blocks, slices)]
    return SdpSolution(mats, x_orig[free_sl].copy(), y_orig, s_orig, status, res,
                       it, float(prob.c @ x_orig))
