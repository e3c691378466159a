"""First-order conic solver: linear objective over affine set + cone product.

Solves
    minimize    c^T x
    subject to  A x + s = b,   s in K,
where K is an ordered product of zero, nonnegative, second-order, and
positive-semidefinite cones.  The method is operator splitting on the
homogeneous self-dual embedding: each iteration alternates one linear-system
solve (a single Cholesky factorization of I + A^T A, reused) with Euclidean
projections onto the cones, preceded by Ruiz equilibration.  Infeasibility
and unboundedness are detected through certificate residuals of the
embedding.

PSD cones act on scaled-vectorized symmetric matrices (upper triangle, row
by row, off-diagonals multiplied by sqrt(2)) so that Euclidean projection
of the vector equals eigenvalue clamping of the matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse

CONE_KINDS = ("zero", "nonneg", "soc", "psd")


# ---------------------------------------------------------------------------
# symmetric matrix vectorization

_SQRT2 = np.sqrt(2.0)


def psd_order(svec_dim: int) -> int:
    """Matrix order d from the svec length d(d+1)/2."""
    d = int((np.sqrt(8 * svec_dim + 1) - 1) / 2 + 0.5)
    if d * (d + 1) // 2 != svec_dim:
        raise ValueError(f"{svec_dim} is not a triangle number")
    return d


def svec(S: np.ndarray) -> np.ndarray:
    """Scaled vectorization of a symmetric matrix (off-diagonals * sqrt(2))."""
    d = S.shape[0]
    i, j = np.triu_indices(d)
    v = S[i, j].astype(float).copy()
    v[i != j] *= _SQRT2
    return v


def smat(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`svec`."""
    d = psd_order(len(v))
    i, j = np.triu_indices(d)
    S = np.zeros((d, d))
    vals = np.asarray(v, dtype=float).copy()
    vals[i != j] /= _SQRT2
    S[i, j] = vals
    S[j, i] = vals
    return S


# ---------------------------------------------------------------------------
# program and solution containers


@dataclass(frozen=True)
class ConicProgram:
    """Standard-form cone program data.

    ``cones`` lists (kind, dim) groups in row order; dims must partition the
    rows of A exactly.  PSD dims are svec lengths.
    """

    c: np.ndarray
    A: scipy.sparse.csr_matrix
    b: np.ndarray
    cones: tuple

    def __post_init__(self):
        A = self.A
        if not scipy.sparse.issparse(A):
            A = scipy.sparse.csr_matrix(np.atleast_2d(np.asarray(A, dtype=float)))
        else:
            A = A.tocsr()
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float).ravel())
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).ravel())
        object.__setattr__(self, "cones", tuple((str(k), int(d)) for k, d in self.cones))
        m, n = self.A.shape
        if self.c.shape != (n,):
            raise ValueError(f"c has length {self.c.shape[0]}, expected {n}")
        if self.b.shape != (m,):
            raise ValueError(f"b has length {self.b.shape[0]}, expected {m}")
        total = 0
        for kind, dim in self.cones:
            if kind not in CONE_KINDS:
                raise ValueError(f"unknown cone kind {kind!r}")
            if dim < 1:
                raise ValueError("cone dimensions must be >= 1")
            if kind == "psd":
                psd_order(dim)  # raises unless triangle number
            total += dim
        if total != m:
            raise ValueError(f"cone dims sum to {total}, but A has {m} rows")

    @property
    def num_vars(self) -> int:
        return self.A.shape[1]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class ConicSolution:
    primal: np.ndarray
    dual: np.ndarray
    slack: np.ndarray
    status: str
    residuals: tuple  # (primal, dual, gap)
    iterations: int
    objective: float


@dataclass(frozen=True)
class SolverSettings:
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    eps_gap: float = 1e-6
    max_iter: int = 100_000
    over_relaxation: float = 1.5
    eps_infeasible: float = 1e-7
    check_interval: int = 25
    ruiz_passes: int = 10


# ---------------------------------------------------------------------------
# cone projections


def project_cone(v: np.ndarray, kind: str, dim: Optional[int] = None) -> np.ndarray:
    """Euclidean projection of ``v`` onto one cone of the given kind."""
    v = np.asarray(v, dtype=float).ravel()
    if dim is None:
        dim = len(v)
    if len(v) != dim:
        raise ValueError(f"vector has length {len(v)}, expected {dim}")
    if kind == "zero":
        return np.zeros_like(v)
    if kind == "nonneg":
        return np.maximum(v, 0.0)
    if kind == "soc":
        return _proj_soc_single(v)
    if kind == "psd":
        S = smat(v)
        w, U = np.linalg.eigh(S)
        return svec((U * np.clip(w, 0.0, None)) @ U.T)
    raise ValueError(f"unknown cone kind {kind!r}")


def project_dual_cone(v: np.ndarray, kind: str, dim: Optional[int] = None) -> np.ndarray:
    """Projection onto the dual cone (free space for the zero cone)."""
    if kind == "zero":
        return np.asarray(v, dtype=float).ravel().copy()
    return project_cone(v, kind, dim)


def _proj_soc_single(v):
    t, x = v[0], v[1:]
    nx = np.linalg.norm(x)
    if nx <= t:
        return v.copy()
    if nx <= -t:
        return np.zeros_like(v)
    a = 0.5 * (t + nx)
    out = np.empty_like(v)
    out[0] = a
    out[1:] = (a / nx) * x if nx > 0 else 0.0
    return out


class _ConeIndex:
    """Precomputed row layout of the cone product, with batched projections."""

    def __init__(self, cones):
        self.zero = []
        self.nonneg = []
        self.soc_by_dim = {}
        self.psd = []
        self.blocks = []
        start = 0
        for kind, dim in cones:
            self.blocks.append((kind, start, dim))
            if kind == "zero":
                self.zero.append((start, dim))
            elif kind == "nonneg":
                self.nonneg.append((start, dim))
            elif kind == "soc":
                self.soc_by_dim.setdefault(dim, []).append(start)
            else:
                self.psd.append((start, dim, psd_order(dim)))
            start += dim
        self.m = start
        nn_idx = np.concatenate([np.arange(s, s + d) for s, d in self.nonneg]) \
            if self.nonneg else np.empty(0, dtype=int)
        self.nonneg_idx = nn_idx.astype(int)
        self.soc_gather = {
            dim: np.stack([np.arange(s, s + dim) for s in starts])
            for dim, starts in self.soc_by_dim.items()
        }

    def project_dual_inplace(self, v):
        """Project onto the dual cone product (zero rows become free)."""
        if len(self.nonneg_idx):
            np.maximum(v[self.nonneg_idx], 0.0, out=v[self.nonneg_idx])
        for dim, gather in self.soc_gather.items():
            block = v[gather]  # (num_cones, dim)
            t = block[:, 0]
            x = block[:, 1:]
            nx = np.linalg.norm(x, axis=1)
            inside = nx <= t
            below = nx <= -t
            scale_rows = ~(inside | below)
            a = 0.5 * (t + nx)
            out = block.copy()
            out[below] = 0.0
            if np.any(scale_rows):
                safe = np.where(nx[scale_rows] > 0, nx[scale_rows], 1.0)
                out[scale_rows, 0] = a[scale_rows]
                out[scale_rows, 1:] = x[scale_rows] * (a[scale_rows] / safe)[:, None]
            v[gather] = out
        for start, dim, order in self.psd:
            v[start:start + dim] = project_cone(v[start:start + dim], "psd", dim)
        return v

    def project_primal(self, v):
        """Projection onto the primal cone product (used for slack extraction)."""
        out = v.copy()
        for start, dim in self.zero:
            out[start:start + dim] = 0.0
        if len(self.nonneg_idx):
            out[self.nonneg_idx] = np.maximum(out[self.nonneg_idx], 0.0)
        for dim, gather in self.soc_gather.items():
            for row in gather:
                out[row] = _proj_soc_single(out[row])
        for start, dim, order in self.psd:
            out[start:start + dim] = project_cone(out[start:start + dim], "psd", dim)
        return out


# ---------------------------------------------------------------------------
# equilibration


def _ruiz_equilibrate(A, cones, passes):
    """Cone-aware Ruiz scaling; rows inside one SOC/PSD block share a factor."""
    m, n = A.shape
    D = np.ones(m)
    E = np.ones(n)
    work = A.tocsr(copy=True)
    blocks = []
    start = 0
    for kind, dim in cones:
        blocks.append((kind, start, dim))
        start += dim
    for _ in range(passes):
        absw = abs(work)
        row_max = absw.max(axis=1).toarray().ravel()
        col_max = absw.max(axis=0).toarray().ravel()
        for kind, s, d in blocks:
            if kind in ("soc", "psd"):
                row_max[s:s + d] = row_max[s:s + d].max()
        row_max[row_max == 0] = 1.0
        col_max[col_max == 0] = 1.0
        dr = 1.0 / np.sqrt(row_max)
        dc = 1.0 / np.sqrt(col_max)
        work = scipy.sparse.diags(dr) @ work @ scipy.sparse.diags(dc)
        D *= dr
        E *= dc
    return work.tocsr(), D, E


# ---------------------------------------------------------------------------
# solver


def solve(prog: ConicProgram, settings: SolverSettings = SolverSettings(),
          warm_start: Optional[tuple] = None) -> ConicSolution:
    """Solve the cone program by splitting on the self-dual embedding.

    ``warm_start`` may supply (x, y, s) in original units to seed the
    iteration.  The returned residuals are measured against the original
    (unequilibrated) data.
    """
    A0 = prog.A
    b0 = prog.b
    c0 = prog.c
    m, n = A0.shape
    cone_index = _ConeIndex(prog.cones)

    Ah, D, E = _ruiz_equilibrate(A0, prog.cones, settings.ruiz_passes)
    bh = D * b0
    ch = E * c0
    gamma_b = 1.0 / (1.0 + np.linalg.norm(bh))
    gamma_c = 1.0 / (1.0 + np.linalg.norm(ch))
    bh = bh * gamma_b
    ch = ch * gamma_c

    AhT = Ah.T.tocsr()
    AtA = (AhT @ Ah).toarray()
    AtA[np.diag_indices_from(AtA)] += 1.0
    cho = scipy.linalg.cho_factor(AtA, lower=True, check_finite=False)

    def m_solve(w1, w2):
        x = scipy.linalg.cho_solve(cho, w1 - AhT @ w2, check_finite=False)
        return x, w2 + Ah @ x

    g_x, g_y = m_solve(ch, bh)
    h_dot_g = ch @ g_x + bh @ g_y
    tau_denom = 1.0 + h_dot_g

    ux = np.zeros(n)
    uy = np.zeros(m)
    ut = 1.0
    vs = np.zeros(m)
    vk = 1.0
    if warm_start is not None:
        x0, y0, s0 = warm_start
        if x0 is not None:
            ux = gamma_b * np.asarray(x0, dtype=float) / E
        if y0 is not None:
            uy = gamma_c * np.asarray(y0, dtype=float) * D
        if s0 is not None:
            vs = gamma_b * np.asarray(s0, dtype=float) * D
        ut, vk = 1.0, 0.0

    alpha = settings.over_relaxation
    norm_b1 = 1.0 + np.linalg.norm(b0)
    norm_c1 = 1.0 + np.linalg.norm(c0)

    def unscaled(ux, uy, vs, tau):
        x = (E * ux) / (gamma_b * tau)
        y = (D * uy) / (gamma_c * tau)
        s = (vs / D) / (gamma_b * tau)
        return x, y, s

    def residuals(x, y, s):
        pres = np.linalg.norm(A0 @ x + s - b0) / norm_b1
        dres = np.linalg.norm(A0.T @ y + c0) / norm_c1
        cx = c0 @ x
        by = b0 @ y
        gap = abs(cx + by) / (1.0 + abs(cx) + abs(by))
        return pres, dres, gap, cx

    best = None
    best_score = np.inf
    status = "max_iter"
    iterations = settings.max_iter

    for it in range(settings.max_iter):
        # linear-system half step, (I + Q) u_tilde = u + v
        zx = ux  # v_x is identically zero
        zy = uy + vs
        zt = ut + vk
        px, py = m_solve(zx, zy)
        t_tilde = (zt + ch @ px + bh @ py) / tau_denom
        tx = px - t_tilde * g_x
        ty = py - t_tilde * g_y

        # over-relaxation then cone projection
        rx = alpha * tx + (1 - alpha) * ux
        ry = alpha * ty + (1 - alpha) * uy
        rt = alpha * t_tilde + (1 - alpha) * ut

        new_ux = rx  # free cone
        wy = ry - vs
        wt = rt - vk
        new_uy = cone_index.project_dual_inplace(wy.copy())
        new_ut = max(wt, 0.0)
        vs = vs - ry + new_uy
        vk = vk - rt + new_ut
        ux, uy, ut = new_ux, new_uy, new_ut

        if (it + 1) % settings.check_interval != 0 and it + 1 != settings.max_iter:
            continue

        scale = max(np.linalg.norm(ux), np.linalg.norm(uy), 1.0)
        if ut > 1e-9 * scale:
            x, y, s = unscaled(ux, uy, vs, ut)
            pres, dres, gap, cx = residuals(x, y, s)
            score = max(pres, dres, gap)
            if score < best_score:
                best_score = score
                best = (x, y, s, (pres, dres, gap), cx)
            if pres <= settings.eps_primal and dres <= settings.eps_dual \
                    and gap <= settings.eps_gap:
                status = "optimal"
                iterations = it + 1
                break
        # certificate checks; the normalized tests are scale invariant and
        # require membership in the cones, which projection guarantees
        x_dir = E * ux
        y_dir = D * uy
        s_dir = vs / D
        by_dir = b0 @ y_dir
        cx_dir = c0 @ x_dir
        if by_dir < -1e-14 * max(1.0, np.linalg.norm(y_dir)):
            infeas_gap = np.linalg.norm(A0.T @ y_dir) * max(np.linalg.norm(b0), 1.0)
            if infeas_gap <= settings.eps_infeasible * (-by_dir):
                status = "infeasible"
                iterations = it + 1
                best = (x_dir, y_dir / (-by_dir), s_dir,
                        (np.inf, np.inf, np.inf), np.nan)
                break
        if cx_dir < -1e-14 * max(1.0, np.linalg.norm(x_dir)):
            unbdd_gap = np.linalg.norm(A0 @ x_dir + s_dir) * max(np.linalg.norm(c0), 1.0)
            if unbdd_gap <= settings.eps_infeasible * (-cx_dir):
                status = "unbounded"
                iterations = it + 1
                best = (x_dir / (-cx_dir), y_dir, s_dir / (-cx_dir),
                        (np.inf, np.inf, np.inf), np.nan)
                break

    if best is None:
        x, y, s = unscaled(ux, uy, vs, max(ut, 1e-300))
        pres, dres, gap, cx = residuals(x, y, s)
        best = (x, y, s, (pres, dres, gap), cx)
    x, y, s, res, cx = best
    return ConicSolution(primal=x, dual=y, slack=s, status=status,
                         residuals=res, iterations=iterations,
                         objective=float(cx) if np.isfinite(np.asarray(cx, dtype=float)) else np.nan)


# ---------------------------------------------------------------------------
# textual dump


def dump_program(prog: ConicProgram) -> str:
    """Plain-text dump of a program: dimensions, cone list, triplet matrix.

    Sections, one per line group:
      ``conic-program v1`` header, ``vars n``, ``rows m``;
      ``cones`` followed by one ``<kind> <dim>`` line per cone group;
      ``objective`` / ``offset`` with ``<index> <value>`` nonzero entries;
      ``matrix <nnz>`` with ``<row> <col> <value>`` triplets; ``end``.
    """
    lines = ["conic-program v1",
             f"vars {prog.num_vars}",
             f"rows {prog.num_rows}",
             "cones"]
    lines += [f"{kind} {dim}" for kind, dim in prog.cones]
    lines.append("objective")
    lines += [f"{i} {v!r}" for i, v in enumerate(prog.c) if v != 0.0]
    lines.append("offset")
    lines += [f"{i} {v!r}" for i, v in enumerate(prog.b) if v != 0.0]
    coo = prog.A.tocoo()
    lines.append(f"matrix {coo.nnz}")
    order = np.lexsort((coo.col, coo.row))
    lines += [f"{coo.row[k]} {coo.col[k]} {coo.data[k]!r}" for k in order]
    lines.append("end")
    return "\n".join(lines) + "\n"
