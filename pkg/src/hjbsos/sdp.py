"""Small-scale semidefinite programming with an embedded interior-point solver.

Problem form
------------
    minimize    c . w
    subject to  A [w; svec(X_1); ...; svec(X_K)] = b
                X_j  positive semidefinite

Free scalars w and the entries of the PSD blocks are the decision variables;
the objective is linear over the free scalars only.  ``svec`` is the scaled
upper-triangle vectorization (off-diagonal entries times sqrt(2)) so that
matrix inner products become plain dot products.

Solver
------
Infeasible-start primal-dual path following on the homogeneous self-dual
embedding, with Nesterov-Todd scaling for the PSD blocks and a Mehrotra
predictor-corrector step.  The embedding yields Farkas-type certificates on
infeasible problems instead of heuristic divergence tests, which the degree
hierarchy driver needs in order to distinguish "increase the degree" from
"solver failure".

The Schur complement M = A_s T^2 A_s' is block diagonal with respect to
groups of constraint rows that share PSD blocks (coefficient-matching rows of
one sum-of-squares constraint never touch another constraint's Gram block).
The KKT solve exploits this: one small Cholesky per row group, then a dense
quasidefinite system over the free scalars and the purely-scalar rows.

All tolerances are configurable; defaults are 1e-8 for feasibility and gap,
200 iterations, and 1e-10 static regularization on the KKT system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
STALLED = "stalled"

_SQRT2 = float(np.sqrt(2.0))


def svec_len(n: int) -> int:
    return n * (n + 1) // 2


def svec_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Upper-triangle (i, j) index arrays in row-major order plus the scale
    vector (sqrt(2) off the diagonal)."""
    ii, jj = np.triu_indices(n)
    scale = np.where(ii == jj, 1.0, _SQRT2)
    return ii, jj, scale


def svec(Mat: np.ndarray) -> np.ndarray:
    n = Mat.shape[0]
    ii, jj, scale = svec_indices(n)
    return Mat[ii, jj] * scale


def unsvec(v: np.ndarray, n: int) -> np.ndarray:
    ii, jj, scale = svec_indices(n)
    out = np.zeros((n, n))
    out[ii, jj] = v / scale
    out[jj, ii] = v / scale
    out[np.arange(n), np.arange(n)] = v[ii == jj]
    return out


@dataclass
class SdpProblem:
    """Equality-constrained SDP in the block/free-variable form above.

    Column layout of ``rows``: free scalars first, then the svec of each PSD
    block in order.
    """

    block_dims: list[int]
    n_free: int
    c_free: np.ndarray
    rows: sp.csr_matrix
    rhs: np.ndarray

    def __post_init__(self):
        self.c_free = np.asarray(self.c_free, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.c_free.shape != (self.n_free,):
            raise ValueError("objective length must equal n_free")
        want = self.n_free + sum(svec_len(d) for d in self.block_dims)
        if self.rows.shape[1] != want:
            raise ValueError(
                f"constraint matrix has {self.rows.shape[1]} columns, expected {want}"
            )
        if self.rows.shape[0] != self.rhs.shape[0]:
            raise ValueError("rhs length must equal the number of rows")

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    def block_offsets(self) -> list[int]:
        offs = [self.n_free]
        for d in self.block_dims:
            offs.append(offs[-1] + svec_len(d))
        return offs


@dataclass
class SolverOptions:
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    tol_infeas: float = 1e-8
    max_iterations: int = 200
    reg: float = 1e-10
    step_fraction: float = 0.99
    verbose: bool = False


@dataclass
class SdpSolution:
    status: str
    objective: float | None
    y_free: np.ndarray | None
    block_matrices: list[np.ndarray] | None
    kkt_residuals: dict
    iterations: int
    dual_y: np.ndarray | None = None
    certificate: dict | None = None

    def is_feasible(self) -> bool:
        return self.status == OPTIMAL


class SdpError(Exception):
    pass


# ---------------------------------------------------------------------------
# Row-group structure
# ---------------------------------------------------------------------------


@dataclass
class _BlockScatter:
    """Precomputed scatter of one group's rows into stacked symmetric matrices."""

    block: int
    sub: sp.csr_matrix  # group rows x svec(block) columns
    loc: np.ndarray  # local row index per entry
    ei: np.ndarray  # matrix row index per entry
    ej: np.ndarray  # matrix col index per entry
    val: np.ndarray  # matrix entry value per entry


@dataclass
class _Group:
    rows: np.ndarray
    blocks: list[int]
    scatters: list[_BlockScatter]
    free_cols: np.ndarray
    G: np.ndarray  # dense rows x free_cols slice of the free part
    A_psd: sp.csr_matrix  # group rows x all PSD columns
    proj: tuple  # Cholesky factor of A_psd A_psd'


class _Structure:
    """Layout, row groups, and per-group scatter maps for one problem."""

    def __init__(self, prob: SdpProblem):
        self.prob = prob
        self.nw = prob.n_free
        self.dims = list(prob.block_dims)
        self.offsets = prob.block_offsets()
        m = prob.n_rows
        A = prob.rows.tocsc()
        self.A = prob.rows.tocsr()
        self.At = prob.rows.T.tocsr()

        # Union-find over rows: rows sharing any PSD block live in one group.
        parent = np.arange(m)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb

        block_rows: list[np.ndarray] = []
        for j, d in enumerate(self.dims):
            cols = A[:, self.offsets[j] : self.offsets[j + 1]]
            rows_j = np.unique(cols.tocoo().row)
            block_rows.append(rows_j)
            for r in rows_j[1:]:
                union(rows_j[0], r)

        roots = np.array([find(r) for r in range(m)])
        touched = np.zeros(m, dtype=bool)
        for rows_j in block_rows:
            touched[rows_j] = True

        self.pure_rows = np.where(~touched)[0]
        group_map: dict[int, list[int]] = {}
        for j, rows_j in enumerate(block_rows):
            if rows_j.size == 0:
                continue
            group_map.setdefault(int(roots[rows_j[0]]), []).append(j)

        Aw = self.A[:, : self.nw]
        self.A_psd = self.A[:, self.nw :].tocsr()
        self.groups: list[_Group] = []
        for root, blocks in sorted(group_map.items()):
            rows_r = np.unique(np.concatenate([block_rows[j] for j in blocks]))
            scatters = []
            for j in blocks:
                sub = self.A[rows_r][:, self.offsets[j] : self.offsets[j + 1]].tocsr()
                coo = sub.tocoo()
                ii, jj, scale = svec_indices(self.dims[j])
                ei = ii[coo.col]
                ej = jj[coo.col]
                off = ei != ej
                # symmetric scatter: off-diagonal svec entries feed both (i,j)
                # and (j,i) with value v / sqrt(2)
                loc = np.concatenate([coo.row, coo.row[off]])
                mi = np.concatenate([ei, ej[off]])
                mj = np.concatenate([ej, ei[off]])
                vv = np.concatenate(
                    [np.where(off, coo.data / _SQRT2, coo.data), coo.data[off] / _SQRT2]
                )
                scatters.append(
                    _BlockScatter(block=j, sub=sub, loc=loc, ei=mi, ej=mj, val=vv)
                )
            sub_w = Aw[rows_r]
            free_cols = np.unique(sub_w.tocoo().col)
            G = sub_w[:, free_cols].toarray() if free_cols.size else np.zeros(
                (rows_r.size, 0)
            )
            # Fixed normal matrix of the group's PSD columns; used to project
            # reconstructed primal directions back onto the linear equations
            # (the T^2 reconstruction amplifies solve error near convergence).
            Ar = self.A_psd[rows_r]
            AAT = (Ar @ Ar.T).toarray()
            AAT[np.diag_indices_from(AAT)] += 1e-12 * max(np.max(np.diag(AAT)), 1.0)
            proj = sla.cho_factor(AAT, lower=True, check_finite=False)
            self.groups.append(
                _Group(rows=rows_r, blocks=blocks, scatters=scatters,
                       free_cols=free_cols, G=G, A_psd=Ar, proj=proj)
            )

        self.Ef = Aw[self.pure_rows].toarray() if self.pure_rows.size else np.zeros(
            (0, self.nw)
        )
        sanity = self.A[self.pure_rows][:, self.nw :]
        if sanity.nnz:
            raise SdpError("internal: pure-scalar rows touch PSD columns")


# ---------------------------------------------------------------------------
# Nesterov-Todd scaling
# ---------------------------------------------------------------------------


@dataclass
class _NTScale:
    G: np.ndarray  # scaling factor: G' S G = Ginv X Ginv' = diag(lam)
    Ginv: np.ndarray
    lam: np.ndarray
    Wp: np.ndarray  # G G' (the PSD scaling-point matrix)


def _chol_psd(Mat: np.ndarray) -> np.ndarray:
    n = Mat.shape[0]
    jitter = 0.0
    for _ in range(6):
        try:
            return np.linalg.cholesky(Mat + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            base = max(np.trace(Mat) / n, 1e-12)
            jitter = max(jitter * 100.0, 1e-14 * base)
    raise SdpError("cholesky failed on iterate; matrix left the cone")


def _nt_scale(X: np.ndarray, S: np.ndarray) -> _NTScale:
    Rx = _chol_psd(X)
    Rs = _chol_psd(S)
    U, sig, Vt = np.linalg.svd(Rs.T @ Rx)
    sig = np.maximum(sig, 1e-300)
    G = Rx @ Vt.T @ np.diag(1.0 / np.sqrt(sig))
    Ginv = np.diag(np.sqrt(sig)) @ Vt @ sla.solve_triangular(
        Rx, np.eye(Rx.shape[0]), lower=True
    )
    return _NTScale(G=G, Ginv=Ginv, lam=sig, Wp=G @ G.T)


def _max_step_psd(Mat: np.ndarray, dMat: np.ndarray) -> float:
    """Largest alpha with Mat + alpha*dMat still PSD (Mat strictly PD)."""
    L = _chol_psd(Mat)
    Y = sla.solve_triangular(L, dMat, lower=True)
    Y = sla.solve_triangular(L, Y.T, lower=True)
    wmin = float(np.linalg.eigvalsh(0.5 * (Y + Y.T)).min())
    if wmin >= 0.0:
        return np.inf
    return -1.0 / wmin


# ---------------------------------------------------------------------------
# KKT factorization per iteration
# ---------------------------------------------------------------------------


class _KktFactor:
    """Factor the reduced KKT system [[M, Aw], [Aw', 0]] for one iteration.

    Each row-group block of M is Jacobi-scaled before Cholesky so the static
    regularization acts relative to the block's magnitude; near convergence
    the raw blocks span many orders of magnitude and an absolute shift would
    swamp the small ones.  Residuals for refinement are measured against the
    unregularized blocks, so refinement also removes the regularization bias.
    """

    def __init__(self, st: _Structure, scales: list[_NTScale], reg: float):
        self.st = st
        self.scales = scales
        self.reg = reg
        self.Ms: list[np.ndarray] = []
        self.Dscale: list[np.ndarray] = []
        self.chols = []
        self.Zs: list[np.ndarray] = []
        nw = st.nw

        S_w = np.zeros((nw, nw))
        for grp in st.groups:
            mr = grp.rows.size
            M = np.zeros((mr, mr))
            for sc in grp.scatters:
                d = st.dims[sc.block]
                Wp = scales[sc.block].Wp
                stack = np.zeros((mr, d, d))
                stack[sc.loc, sc.ei, sc.ej] = sc.val
                mid = Wp[None, :, :] @ stack @ Wp[None, :, :]
                ii, jj, scale = svec_indices(d)
                P = mid[:, ii, jj] * scale
                M += sc.sub @ P.T
            M = 0.5 * (M + M.T)
            self.Ms.append(M)
            D = np.sqrt(np.maximum(np.diag(M), 1e-280))
            self.Dscale.append(D)
            Mn = M / np.outer(D, D)
            cf = None
            bump = reg
            for _ in range(10):
                try:
                    cf = sla.cho_factor(
                        Mn + bump * np.eye(mr), lower=True, check_finite=False
                    )
                    break
                except (np.linalg.LinAlgError, sla.LinAlgError):
                    bump = max(bump * 100.0, 1e-14)
            if cf is None:
                raise SdpError("row-group Schur block could not be factorized")
            self.chols.append(cf)
            Z = self._msolve(len(self.chols) - 1, grp.G) if grp.G.size \
                else np.zeros_like(grp.G)
            self.Zs.append(Z)
            if grp.free_cols.size:
                S_w[np.ix_(grp.free_cols, grp.free_cols)] += grp.G.T @ Z

        mf = st.pure_rows.size
        dK = np.sqrt(np.maximum(np.diag(S_w), 1.0))
        self.dK = dK
        K2 = np.zeros((nw + mf, nw + mf))
        K2[:nw, :nw] = -(S_w / np.outer(dK, dK) + reg * np.eye(nw))
        if mf:
            Efs = st.Ef / dK[None, :]
            K2[:nw, nw:] = Efs.T
            K2[nw:, :nw] = Efs
            K2[nw:, nw:] = reg * np.eye(mf)
        self.lu = sla.lu_factor(K2, check_finite=False)

    def _msolve(self, gi: int, rhs):
        D = self.Dscale[gi]
        scaled = rhs / D if rhs.ndim == 1 else rhs / D[:, None]
        out = sla.cho_solve(self.chols[gi], scaled, check_finite=False)
        return out / D if rhs.ndim == 1 else out / D[:, None]

    def solve(self, u1: np.ndarray, u2: np.ndarray,
              max_refine: int = 4) -> tuple[np.ndarray, np.ndarray]:
        """Solve [[M, Aw], [Aw', 0]] (dy, dw) = (u1, u2), iteratively refined."""
        dy, dw = self._solve_once(u1, u2)
        norm0 = np.linalg.norm(u1) + np.linalg.norm(u2) + 1e-300
        prev = np.inf
        for _ in range(max_refine):
            r1, r2 = self._residual(u1, u2, dy, dw)
            err = (np.linalg.norm(r1) + np.linalg.norm(r2)) / norm0
            if err < 1e-13 or err >= 0.5 * prev:
                break
            prev = err
            ey, ew = self._solve_once(r1, r2)
            dy, dw = dy + ey, dw + ew
        return dy, dw

    def _solve_once(self, u1, u2):
        st = self.st
        nw = st.nw
        mf = st.pure_rows.size
        rhs1 = u2.copy()
        ts = []
        for gi, grp in enumerate(st.groups):
            t = self._msolve(gi, u1[grp.rows])
            ts.append(t)
            if grp.free_cols.size:
                rhs1[grp.free_cols] -= grp.G.T @ t
        rhs1 = rhs1 / self.dK
        rhs = np.concatenate([rhs1, u1[st.pure_rows]]) if mf else rhs1
        sol = sla.lu_solve(self.lu, rhs, check_finite=False)
        dw = sol[:nw] / self.dK
        dy = np.zeros(st.prob.n_rows)
        if mf:
            dy[st.pure_rows] = sol[nw:]
        for gi, grp in enumerate(st.groups):
            if grp.free_cols.size:
                dy[grp.rows] = ts[gi] - self.Zs[gi] @ dw[grp.free_cols]
            else:
                dy[grp.rows] = ts[gi]
        return dy, dw

    def _residual(self, u1, u2, dy, dw):
        st = self.st
        r1 = u1.copy()
        for grp, M in zip(st.groups, self.Ms):
            r1[grp.rows] -= M @ dy[grp.rows]
            if grp.free_cols.size:
                r1[grp.rows] -= grp.G @ dw[grp.free_cols]
        if st.pure_rows.size:
            r1[st.pure_rows] -= st.Ef @ dw
        r2 = u2 - (st.At[: st.nw] @ dy)
        return r1, r2


# ---------------------------------------------------------------------------
# Main solver
# ---------------------------------------------------------------------------


class _State:
    def __init__(self, st: _Structure):
        self.w = np.zeros(st.nw)
        self.xs = [svec(np.eye(d)) for d in st.dims]
        self.y = np.zeros(st.prob.n_rows)
        self.ss = [svec(np.eye(d)) for d in st.dims]
        self.tau = 1.0
        self.kappa = 1.0

    def snapshot(self) -> "_State":
        out = object.__new__(_State)
        out.w = self.w.copy()
        out.xs = [v.copy() for v in self.xs]
        out.y = self.y.copy()
        out.ss = [v.copy() for v in self.ss]
        out.tau = self.tau
        out.kappa = self.kappa
        return out

    def x_full(self) -> np.ndarray:
        return np.concatenate([self.w] + self.xs) if self.xs else self.w.copy()

    def s_psd(self) -> np.ndarray:
        return np.concatenate(self.ss) if self.ss else np.zeros(0)


def solve(prob: SdpProblem, opts: SolverOptions | None = None) -> SdpSolution:
    """Solve the SDP; returns status plus independently recomputed residuals."""
    opts = opts or SolverOptions()
    if not prob.block_dims:
        raise SdpError("problem has no PSD blocks")
    st = _Structure(prob)
    state = _State(st)
    nu = sum(st.dims) + 1.0
    b = prob.rhs
    c = prob.c_free
    bnorm = 1.0 + float(np.linalg.norm(b, np.inf)) if b.size else 1.0
    cnorm = 1.0 + float(np.linalg.norm(c, np.inf)) if c.size else 1.0
    nw = st.nw

    tiny_steps = 0
    best_cert: tuple = (np.inf, None, None)
    best_score = np.inf
    best_mu = np.inf
    best_state: _State | None = None
    last_progress = 0
    prev_cert_quality = np.inf
    it = 0
    for it in range(opts.max_iterations):
        x_full = state.x_full()
        s_psd = state.s_psd()
        Ax = st.A @ x_full
        Aty = st.At @ state.y
        r_P = Ax - b * state.tau
        r_Dw = -Aty[:nw] + c * state.tau
        r_Ds = -Aty[nw:] - s_psd
        ctx = float(c @ state.w)
        bty = float(b @ state.y)
        r_G = bty - ctx - state.kappa
        mu = (float(s_psd @ x_full[nw:]) + state.tau * state.kappa) / nu

        # -- convergence and certificate checks -----------------------------
        tau = state.tau
        pres = np.linalg.norm(r_P / tau) / bnorm if tau > 0 else np.inf
        dres = (
            np.linalg.norm(np.concatenate([r_Dw, r_Ds]) / tau) / cnorm
            if tau > 0 else np.inf
        )
        pobj = ctx / tau if tau > 0 else np.inf
        dobj = bty / tau if tau > 0 else np.inf
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))

        if opts.verbose:
            log.info(
                "iter %3d  mu %.3e  pres %.3e  dres %.3e  gap %.3e  tau %.2e kappa %.2e",
                it, mu, pres, dres, relgap, state.tau, state.kappa,
            )

        if pres <= opts.tol_feas and dres <= opts.tol_feas and relgap <= opts.tol_gap:
            return _finalize(prob, st, state, it, opts)

        if bty > 0:
            ycert = state.y / bty
            resw = np.linalg.norm(Aty[:nw] / bty, np.inf) if nw else 0.0
            ress = np.linalg.norm((Aty[nw:] + s_psd) / bty, np.inf)
            quality = max(resw, ress) / (1.0 + np.linalg.norm(ycert, np.inf))
            if quality < best_cert[0]:
                best_cert = (quality, ycert.copy(), s_psd / bty)
            if quality <= opts.tol_infeas:
                return _finish_infeasible(prob, st, state, it, ycert, s_psd / bty)

        if ctx < 0:
            resx = np.linalg.norm(Ax / (-ctx), np.inf)
            xnorm = np.linalg.norm(x_full / (-ctx), np.inf)
            if resx <= opts.tol_infeas * (1.0 + xnorm):
                return _finish_unbounded(prob, st, state, it)

        score = max(pres, dres, relgap)
        if score < best_score or best_cert[0] < prev_cert_quality or mu < 0.95 * best_mu:
            last_progress = it
        prev_cert_quality = best_cert[0]
        best_mu = min(best_mu, mu)
        if score < best_score:
            best_score = score
            best_state = state.snapshot()
        if it - last_progress > 40:
            break  # nothing moving; classify via certificate or polish below

        # -- scaling and factorization ---------------------------------------
        try:
            scales = [
                _nt_scale(unsvec(xv, d), unsvec(sv, d))
                for xv, sv, d in zip(state.xs, state.ss, st.dims)
            ]
        except SdpError:
            break
        kkt = None
        reg = opts.reg
        while kkt is None:
            try:
                kkt = _KktFactor(st, scales, reg)
            except (np.linalg.LinAlgError, sla.LinAlgError):
                reg *= 100.0
                if reg > 1e-2:
                    break
        if kkt is None:
            break

        qy, qw = kkt.solve(b, c)
        qdot = float(b @ qy - c @ qw) + state.kappa / state.tau
        if not np.isfinite(qdot) or abs(qdot) < 1e-300:
            break

        def direction_raw(tP, tDw, tDs, tG, rcs, rtk):
            """Newton direction for explicit linear targets:
               A dx - b dtau = tP;  -Aw' dy + c dtau = tDw;
               -As' dy - dss = tDs;  b'dy - c'dw - dkappa = tG;
               dxs + T^2 dss = rcs;  tau dkappa + kappa dtau = rtk."""
            corr = np.zeros(x_full.size)
            for j, d in enumerate(st.dims):
                seg = slice(nw + offblk(st, j), nw + offblk(st, j + 1))
                Wp = scales[j].Wp
                t2td = svec(Wp @ unsvec(tDs[offblk(st, j) : offblk(st, j + 1)], d) @ Wp)
                corr[seg] = rcs[j] + t2td
            h1 = tP - st.A @ corr
            h2 = -tDw
            py, pw = kkt.solve(h1, h2)
            num = tG + rtk / state.tau - float(b @ py - c @ pw)
            dtau = num / qdot
            dy = py + dtau * qy
            dw = pw + dtau * qw
            Atdy = st.At @ dy
            dss = [
                -tDs[offblk(st, j) : offblk(st, j + 1)]
                - Atdy[nw + offblk(st, j) : nw + offblk(st, j + 1)]
                for j in range(len(st.dims))
            ]
            dxs = []
            for j, d in enumerate(st.dims):
                Wp = scales[j].Wp
                dxs.append(rcs[j] - svec(Wp @ unsvec(dss[j], d) @ Wp))
            # Project the reconstructed PSD direction back onto the primal
            # linear equations; the T^2 reconstruction amplifies KKT solve
            # error by the squared scaling condition near convergence.
            dx_full = np.concatenate([dw] + dxs)
            rP_dir = tP - (st.A @ dx_full - b * dtau)
            dpsd = np.zeros(x_full.size - nw)
            for grp in st.groups:
                z = sla.cho_solve(grp.proj, rP_dir[grp.rows], check_finite=False)
                dpsd += grp.A_psd.T @ z
            for j in range(len(st.dims)):
                dxs[j] = dxs[j] + dpsd[offblk(st, j) : offblk(st, j + 1)]
            dkappa = (rtk - state.kappa * dtau) / state.tau
            return dw, dxs, dy, dss, dtau, dkappa

        def lin_residuals(dw, dxs, dy, dss, dtau, dkappa, tP, tDw, tG):
            """Residuals of the three linear Newton rows (the complementarity
            rows hold by construction)."""
            dx_full = np.concatenate([dw] + dxs)
            Atdy = st.At @ dy
            eP = tP - (st.A @ dx_full - b * dtau)
            eDw = tDw - (-Atdy[:nw] + c * dtau)
            eG = tG - (float(b @ dy) - float(c @ dw) - dkappa)
            return eP, eDw, eG

        zero_psd = np.zeros(x_full.size - nw)
        zero_rcs = [np.zeros(xv.size) for xv in state.xs]

        def direction(eta, rcs, rtk):
            tP, tDw, tDs, tG = -eta * r_P, -eta * r_Dw, -eta * r_Ds, -eta * r_G
            d0 = direction_raw(tP, tDw, tDs, tG, rcs, rtk)
            scale0 = np.linalg.norm(tP) + np.linalg.norm(tDw) + abs(tG) + 1e-300

            def err_of(d):
                eP, eDw, eG = lin_residuals(*d, tP, tDw, tG)
                return (np.linalg.norm(eP) + np.linalg.norm(eDw) + abs(eG)) / scale0, (eP, eDw, eG)

            best_err, (eP, eDw, eG) = err_of(d0)
            best_d = d0
            for _ in range(3):
                if best_err <= 1e-12:
                    break
                d1 = direction_raw(eP, eDw, zero_psd, eG, zero_rcs, 0.0)
                cand = tuple(
                    a + bb if not isinstance(a, list)
                    else [ai + bi for ai, bi in zip(a, bb)]
                    for a, bb in zip(best_d, d1)
                )
                cand_err, (eP, eDw, eG) = err_of(cand)
                if cand_err >= best_err:
                    break
                best_err, best_d = cand_err, cand
            if opts.verbose:
                log.info("          dir err %.3e (rel)", best_err)
            return best_d

        def max_step(dxs, dss, dtau, dkappa):
            alpha = np.inf
            for j, d in enumerate(st.dims):
                alpha = min(alpha, _max_step_psd(unsvec(state.xs[j], d), unsvec(dxs[j], d)))
                alpha = min(alpha, _max_step_psd(unsvec(state.ss[j], d), unsvec(dss[j], d)))
            if dtau < 0:
                alpha = min(alpha, -state.tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -state.kappa / dkappa)
            return alpha

        def finite(direction_tuple):
            dw_, dxs_, dy_, dss_, dtau_, dkap_ = direction_tuple
            vals = [dw_, dy_, np.array([dtau_, dkap_])] + dxs_ + dss_
            return all(np.all(np.isfinite(v)) for v in vals)

        def centering_target(gamma_c):
            rcs_c = []
            for j, d in enumerate(st.dims):
                sc = scales[j]
                lam = sc.lam
                target = gamma_c * mu * np.eye(d) - np.diag(lam**2)
                denom = 0.5 * (lam[:, None] + lam[None, :])
                rcs_c.append(svec(sc.G @ (target / denom) @ sc.G.T))
            return rcs_c, gamma_c * mu - state.tau * state.kappa

        # -- predictor -------------------------------------------------------
        rcs_aff = [-xv for xv in state.xs]
        rtk_aff = -state.tau * state.kappa
        aff = direction(1.0, rcs_aff, rtk_aff)
        if not finite(aff):
            break
        dw_a, dxs_a, dy_a, dss_a, dtau_a, dkap_a = aff
        alpha_a = min(1.0, 0.999 * max_step(dxs_a, dss_a, dtau_a, dkap_a))
        mu_aff = (
            sum(
                float((state.xs[j] + alpha_a * dxs_a[j]) @ (state.ss[j] + alpha_a * dss_a[j]))
                for j in range(len(st.dims))
            )
            + (state.tau + alpha_a * dtau_a) * (state.kappa + alpha_a * dkap_a)
        ) / nu
        gamma = min(0.999, max((max(mu_aff, 0.0) / mu) ** 3, 1e-9)) if mu > 0 else 0.1
        eta = 1.0 - gamma

        # -- corrector with Mehrotra second-order term -------------------------
        rcs = []
        for j, d in enumerate(st.dims):
            sc = scales[j]
            lam = sc.lam
            dXt = sc.Ginv @ unsvec(dxs_a[j], d) @ sc.Ginv.T
            dSt = sc.G.T @ unsvec(dss_a[j], d) @ sc.G
            cross = dXt @ dSt
            Hc = 0.5 * (cross + cross.T)
            target = gamma * mu * np.eye(d) - np.diag(lam**2) - Hc
            denom = 0.5 * (lam[:, None] + lam[None, :])
            rcs.append(svec(sc.G @ (target / denom) @ sc.G.T))
        rtk = gamma * mu - state.tau * state.kappa - dtau_a * dkap_a
        step = direction(eta, rcs, rtk)
        alpha = (
            min(1.0, opts.step_fraction * max_step(step[1], step[3], step[4], step[5]))
            if finite(step) else 0.0
        )

        if alpha < 1e-5:
            # Mehrotra correction can produce unusable steps on nearly
            # degenerate iterates; retreat to a heavily centered step.
            rcs_c, rtk_c = centering_target(0.9)
            fallback = direction(0.1, rcs_c, rtk_c)
            if finite(fallback):
                alpha_c = min(
                    1.0,
                    opts.step_fraction
                    * max_step(fallback[1], fallback[3], fallback[4], fallback[5]),
                )
                if alpha_c > alpha:
                    step, alpha = fallback, alpha_c
        if opts.verbose:
            log.info("          alpha_aff %.3e  gamma %.3e  alpha %.3e",
                     alpha_a, gamma, alpha)

        if alpha < 1e-8 or not finite(step):
            tiny_steps += 1
            if tiny_steps >= 5:
                break
        else:
            tiny_steps = 0

        if alpha > 0 and finite(step):
            dw, dxs, dy, dss, dtau, dkappa = step
            state.w += alpha * dw
            for j in range(len(st.dims)):
                state.xs[j] = state.xs[j] + alpha * dxs[j]
                state.ss[j] = state.ss[j] + alpha * dss[j]
            state.y += alpha * dy
            state.tau += alpha * dtau
            state.kappa += alpha * dkappa

    # Loop exhausted or broke out: fall back to the best certificate or the
    # best iterate seen.
    if best_cert[0] <= 10.0 * opts.tol_infeas:
        return _finish_infeasible(prob, st, state, it, best_cert[1], best_cert[2])
    if best_state is not None:
        state = best_state
    return _finalize(prob, st, state, it, opts)


def offblk(st: _Structure, j: int) -> int:
    return st.offsets[j] - st.nw


def _kkt_residuals(prob: SdpProblem, w, xs, y, ss) -> dict:
    """Recompute primal/dual residuals and gap from the returned iterates.

    Normalizations match the in-loop measures (1 + inf-norm of the data)."""
    x_full = np.concatenate([w] + xs) if xs else np.asarray(w)
    s_full = np.concatenate([np.zeros(prob.n_free)] + ss)
    Ax = prob.rows @ x_full
    Aty = prob.rows.T @ y
    c_full = np.concatenate([prob.c_free, np.zeros(x_full.size - prob.n_free)])
    bn = 1.0 + (float(np.linalg.norm(prob.rhs, np.inf)) if prob.rhs.size else 0.0)
    cn = 1.0 + (float(np.linalg.norm(prob.c_free, np.inf)) if prob.c_free.size else 0.0)
    pres = float(np.linalg.norm(Ax - prob.rhs)) / bn
    dres = float(np.linalg.norm(Aty + s_full - c_full)) / cn
    pobj = float(prob.c_free @ w)
    dobj = float(prob.rhs @ y)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return {"primal": pres, "dual": dres, "gap": gap}


def _polish(prob: SdpProblem, w, xs, y, ss, rounds: int = 2):
    """Least-squares correction of the scaled candidate against the original
    (fixed, well-conditioned) constraint matrix.  The interior-point KKT
    systems degenerate as mu -> 0; this removes the solve noise they leave in
    the linear residuals without touching the cone iterates."""
    import scipy.sparse.linalg as spla

    A = prob.rows
    c_full = np.concatenate([prob.c_free, np.zeros(A.shape[1] - prob.n_free)])
    for _ in range(rounds):
        x_full = np.concatenate([w] + xs) if xs else np.asarray(w)
        r = prob.rhs - A @ x_full
        if np.linalg.norm(r) > 1e-15 * (1 + np.linalg.norm(prob.rhs)):
            dx = spla.lsqr(A, r, atol=1e-14, btol=1e-14, iter_lim=2000)[0]
            w = w + dx[: prob.n_free]
            off = prob.n_free
            for j in range(len(xs)):
                xs[j] = xs[j] + dx[off : off + xs[j].size]
                off += xs[j].size
        s_full = np.concatenate([np.zeros(prob.n_free)] + ss)
        rd = c_full - s_full - A.T @ y
        if np.linalg.norm(rd) > 1e-15 * (1 + np.linalg.norm(c_full)):
            dy = spla.lsqr(A.T, rd, atol=1e-14, btol=1e-14, iter_lim=2000)[0]
            y = y + dy
    return w, xs, y, ss


def _blocks_nearly_psd(xs, dims, tol: float) -> bool:
    for xv, d in zip(xs, dims):
        Mat = unsvec(xv, d)
        wmin = float(np.linalg.eigvalsh(Mat).min())
        if wmin < -tol * (1.0 + np.linalg.norm(Mat)):
            return False
    return True


def _finalize(prob, st, state, it, opts) -> SdpSolution:
    """Scale out tau, polish, and classify as optimal or stalled."""
    tau = max(state.tau, 1e-300)
    w = state.w / tau
    xs = [xv / tau for xv in state.xs]
    y = state.y / tau
    ss = [sv / tau for sv in state.ss]
    cand = [(w, xs, y, ss, _kkt_residuals(prob, w, xs, y, ss))]
    try:
        wp, xsp, yp, ssp = _polish(prob, w.copy(), [v.copy() for v in xs],
                                   y.copy(), [v.copy() for v in ss])
        cand.append((wp, xsp, yp, ssp, _kkt_residuals(prob, wp, xsp, yp, ssp)))
    except Exception:  # polish is best-effort only
        pass

    def passes(entry):
        res = entry[4]
        return (
            res["primal"] <= opts.tol_feas
            and res["dual"] <= opts.tol_feas
            and res["gap"] <= opts.tol_gap
            and _blocks_nearly_psd(entry[1], st.dims, opts.tol_feas)
        )

    chosen = None
    for entry in reversed(cand):  # prefer the polished candidate
        if passes(entry):
            chosen = (entry, OPTIMAL)
            break
    if chosen is None:
        entry = min(cand, key=lambda e: max(e[4].values()))
        chosen = (entry, STALLED)
    (w, xs, y, ss, res), status = chosen
    return SdpSolution(
        status=status,
        objective=float(prob.c_free @ w),
        y_free=w,
        block_matrices=[unsvec(xv, d) for xv, d in zip(xs, st.dims)],
        kkt_residuals=res,
        iterations=it,
        dual_y=y,
    )


def _finish_infeasible(prob, st, state, it, ycert, ss_scaled) -> SdpSolution:
    cert = {
        "farkas_y": ycert,
        "farkas_s": ss_scaled,
        "b_dot_y": 1.0,
    }
    return SdpSolution(
        status=INFEASIBLE,
        objective=None,
        y_free=None,
        block_matrices=None,
        kkt_residuals={"primal": np.inf, "dual": np.inf, "gap": np.inf},
        iterations=it,
        certificate=cert,
    )


def _finish_unbounded(prob, st, state, it) -> SdpSolution:
    return SdpSolution(
        status=UNBOUNDED,
        objective=None,
        y_free=None,
        block_matrices=None,
        kkt_residuals={"primal": np.inf, "dual": np.inf, "gap": np.inf},
        iterations=it,
        certificate={"ray_x": state.x_full()},
    )




def certify_infeasible(prob: SdpProblem, sol: SdpSolution, tol: float = 1e-6) -> bool:
    """Validate the Farkas-type certificate attached to an infeasible solve."""
    if sol.status != INFEASIBLE:
        raise SdpError("certify_infeasible called on non-infeasible status")
    cert = sol.certificate or {}
    y = cert.get("farkas_y")
    if y is None:
        return False
    Aty = prob.rows.T @ y
    bty = float(prob.rhs @ y)
    if bty <= 0:
        return False
    scale = 1.0 + float(np.linalg.norm(y, np.inf))
    if prob.n_free and np.linalg.norm(Aty[: prob.n_free], np.inf) > tol * scale:
        return False
    off = prob.n_free
    for d in prob.block_dims:
        seg = Aty[off : off + svec_len(d)]
        S = unsvec(-seg, d)
        wmin = float(np.linalg.eigvalsh(S).min())
        if wmin < -tol * (1.0 + np.linalg.norm(S)):
            return False
        off += svec_len(d)
    return True


# ---------------------------------------------------------------------------
# Plain-text sparse triplet dump (debug interchange format)
# ---------------------------------------------------------------------------


def dump_problem(prob: SdpProblem, path: str) -> None:
    """Write the problem as plain-text triplets for external cross-checking."""
    lines = ["# hjbsos sdp dump v1"]
    lines.append("blocks " + " ".join(str(d) for d in prob.block_dims))
    lines.append(f"nfree {prob.n_free}")
    lines.append(f"nrows {prob.n_rows}")
    for i, v in enumerate(prob.c_free):
        if v != 0.0:
            lines.append(f"obj {i} {v!r}")
    for i, v in enumerate(prob.rhs):
        if v != 0.0:
            lines.append(f"rhs {i} {v!r}")
    coo = prob.rows.tocoo()
    for r, cc, v in zip(coo.row, coo.col, coo.data):
        lines.append(f"A {r} {cc} {v!r}")
    lines.append("end")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path: str) -> SdpProblem:
    block_dims: list[int] = []
    n_free = 0
    n_rows = 0
    obj: dict[int, float] = {}
    rhs: dict[int, float] = {}
    trips: list[tuple[int, int, float]] = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#") or line == "end":
                continue
            parts = line.split()
            if parts[0] == "blocks":
                block_dims = [int(p) for p in parts[1:]]
            elif parts[0] == "nfree":
                n_free = int(parts[1])
            elif parts[0] == "nrows":
                n_rows = int(parts[1])
            elif parts[0] == "obj":
                obj[int(parts[1])] = float(parts[2])
            elif parts[0] == "rhs":
                rhs[int(parts[1])] = float(parts[2])
            elif parts[0] == "A":
                trips.append((int(parts[1]), int(parts[2]), float(parts[3])))
            else:
                raise ValueError(f"unknown dump line {line!r}")
    ncols = n_free + sum(svec_len(d) for d in block_dims)
    c = np.zeros(n_free)
    for i, v in obj.items():
        c[i] = v
    b = np.zeros(n_rows)
    for i, v in rhs.items():
        b[i] = v
    if trips:
        r, cc, v = zip(*trips)
        A = sp.csr_matrix((v, (r, cc)), shape=(n_rows, ncols))
    else:
        A = sp.csr_matrix((n_rows, ncols))
    return SdpProblem(block_dims=block_dims, n_free=n_free, c_free=c, rows=A, rhs=b)
