"""Deterministic conic transcription of one covariance-steering subproblem.

Decision variables are the feedforward stack V, the free entries of the
block-diagonal feedback matrix K, and the terminal-mean slack eta.  The
builders in this module produce the quadratic objective, terminal
constraints, probabilistic half-space rows, and trust-region rows, and
``lower`` stacks everything into a standard-form cone program with an
inverse mapping for solution extraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse

from .blocks import BlockSystem, CostWeights
from .conic import ConicProgram, svec
from .discretization import psd_sqrt


# ---------------------------------------------------------------------------
# scalar normal quantile


_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)


def inverse_normal_cdf(p: float) -> float:
    """Standard normal quantile, |error| <= 1e-9.

    Rational initial guess refined by one Newton step on the CDF expressed
    through the complementary error function.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # one Newton refinement against erfc
    cdf = 0.5 * math.erfc(-x / math.sqrt(2.0))
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        x -= (cdf - p) / pdf
    return x


def allocate_risk(p_total: float, M: int) -> list:
    """Uniform split of a per-step risk budget over M half-spaces."""
    if not 0.0 < p_total < 0.5:
        raise ValueError("total risk must lie in (0, 0.5)")
    if M < 1:
        raise ValueError("need at least one half-space")
    return [p_total / M] * M


# ---------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class HalfSpace:
    """Linear inequality normal^T z <= offset held with failure risk ``risk``."""

    normal: np.ndarray
    offset: float
    risk: float

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).ravel())
        if not np.any(self.normal):
            raise ValueError("half-space normal must be nonzero")
        if not 0.0 < self.risk < 0.5:
            raise ValueError(f"half-space risk must lie in (0, 0.5), got {self.risk}")


@dataclass(frozen=True)
class MeanCost:
    """Convex quadratic running cost on the mean control and mean state.

    ell(u, x) = u^T quad_u u + (x - x_ref)^T quad_x (x - x_ref)
                + lin_u^T u + lin_x^T x
    """

    quad_u: np.ndarray
    quad_x: np.ndarray
    x_ref: np.ndarray  # (N, n_x) or (n_x,) broadcast
    lin_u: np.ndarray
    lin_x: np.ndarray

    @staticmethod
    def control_effort(weight: float, n_u: int, n_x: int) -> "MeanCost":
        return MeanCost(quad_u=weight * np.eye(n_u), quad_x=np.zeros((n_x, n_x)),
                        x_ref=np.zeros(n_x), lin_u=np.zeros(n_u), lin_x=np.zeros(n_x))


@dataclass(frozen=True)
class TrustRegion:
    delta_x: float
    delta_u: float
    p_tr_x: float
    p_tr_u: float

    def __post_init__(self):
        if self.delta_x <= 0 or self.delta_u <= 0:
            raise ValueError("trust-region radii must be positive")
        if not (0 < self.p_tr_x < 0.5 and 0 < self.p_tr_u < 0.5):
            raise ValueError("trust-region risks must lie in (0, 0.5)")


@dataclass(frozen=True)
class Relaxation:
    """Geometric homotopy on constraint offsets over early iterations."""

    n_relax: int = 4
    rho: float = 0.5
    margin: float = 1.05


@dataclass(frozen=True)
class CSProblemSpec:
    """Boundary distributions, constraints, weights and solver shaping."""

    x0_mean: np.ndarray
    P_x0: np.ndarray
    xf_mean: np.ndarray
    P_xf: np.ndarray
    sigma: float
    weights: CostWeights
    mean_cost: MeanCost
    state_constraints: tuple = ()   # per-step tuple (length N+1) of HalfSpace tuples
    control_constraints: tuple = ()  # per-step tuple (length N)
    trust_region: Optional[TrustRegion] = None
    relaxation: Relaxation = Relaxation()
    terminal_mode: str = "soft"     # soft | hard | auto
    w_xf: float = 1000.0
    state_risk_budget: Optional[float] = None
    control_risk_budget: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "x0_mean", np.asarray(self.x0_mean, dtype=float).ravel())
        object.__setattr__(self, "xf_mean", np.asarray(self.xf_mean, dtype=float).ravel())
        object.__setattr__(self, "P_x0", np.asarray(self.P_x0, dtype=float))
        object.__setattr__(self, "P_xf", np.asarray(self.P_xf, dtype=float))
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if np.linalg.eigvalsh(self.P_xf).min() <= 0:
            raise ValueError("P_xf must be positive definite")
        if self.terminal_mode not in ("soft", "hard", "auto"):
            raise ValueError(f"unknown terminal mode {self.terminal_mode!r}")
        if self.w_xf <= 0:
            raise ValueError("w_xf must be positive")
        for budget, per_step, label in (
                (self.state_risk_budget, self.state_constraints, "state"),
                (self.control_risk_budget, self.control_constraints, "control")):
            if budget is None:
                continue
            for k, hs_list in enumerate(per_step):
                total = sum(h.risk for h in hs_list)
                if total > budget + 1e-12:
                    raise ValueError(
                        f"{label} risks at step {k} sum to {total:g} > budget {budget:g}")

    def constraints_for(self, N: int):
        """Normalized (state, control) per-step constraint tuples."""
        state = _broadcast_steps(self.state_constraints, N + 1)
        control = _broadcast_steps(self.control_constraints, N)
        return state, control


def _broadcast_steps(constraints, length):
    constraints = tuple(constraints)
    if constraints and isinstance(constraints[0], HalfSpace):
        return tuple(constraints for _ in range(length))
    if not constraints:
        return tuple(() for _ in range(length))
    if len(constraints) != length:
        raise ValueError(f"expected {length} per-step constraint lists, got {len(constraints)}")
    return tuple(tuple(c) for c in constraints)


@dataclass(frozen=True)
class Policy:
    """Feedforward stack V and per-step feedback gains."""

    V: np.ndarray            # (N * n_u,)
    K_blocks: np.ndarray     # (N, n_u, n_x)

    def __post_init__(self):
        object.__setattr__(self, "V", np.asarray(self.V, dtype=float).ravel())
        object.__setattr__(self, "K_blocks", np.asarray(self.K_blocks, dtype=float))
        N, n_u, n_x = self.K_blocks.shape
        if self.V.shape != (N * n_u,):
            raise ValueError("V length inconsistent with gain blocks")

    @property
    def N(self) -> int:
        return self.K_blocks.shape[0]

    @property
    def n_u(self) -> int:
        return self.K_blocks.shape[1]

    @property
    def n_x(self) -> int:
        return self.K_blocks.shape[2]

    def feedforward(self, k: int) -> np.ndarray:
        return self.V[k * self.n_u:(k + 1) * self.n_u]

    def gain(self, k: int) -> np.ndarray:
        return self.K_blocks[k]

    def block_matrix(self) -> np.ndarray:
        """Full N n_u by (N+1) n_x feedback matrix with trailing zero block."""
        N, n_u, n_x = self.K_blocks.shape
        K = np.zeros((N * n_u, (N + 1) * n_x))
        for k in range(N):
            K[k * n_u:(k + 1) * n_u, k * n_x:(k + 1) * n_x] = self.K_blocks[k]
        return K


# ---------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class QuadraticObjective:
    """J(V, K, eta) = 0.5 z^T H z + g^T z + const + eta_weight * eta.

    z stacks (V, kvec) where kvec holds the free block-diagonal entries of
    K in step-major, row-major order.
    """

    H: np.ndarray
    g: np.ndarray
    const: float
    eta_weight: float
    n_V: int
    n_k: int

    def value(self, V, K_blocks, eta=0.0) -> float:
        z = np.concatenate([np.asarray(V, float).ravel(),
                            np.asarray(K_blocks, float).ravel()])
        return float(0.5 * z @ self.H @ z + self.g @ z + self.const
                     + self.eta_weight * eta)


def kvec_indices(N: int, n_u: int, n_x: int):
    """Global (row, col) indices in K for each free kvec entry."""
    j = np.repeat(np.arange(N), n_u * n_x)
    p_local = np.tile(np.repeat(np.arange(n_u), n_x), N)
    q_local = np.tile(np.arange(n_x), N * n_u)
    return j * n_u + p_local, j * n_x + q_local


def build_cost(blocks: BlockSystem, spec: CSProblemSpec) -> QuadraticObjective:
    """Quadratic objective over (V, kvec) plus the eta penalty weight.

    The feedback part comes from the trace of the weighted covariance,
    expanded through the shared factor Py^{1/2}; the feedforward part is the
    running mean cost evaluated along Acal x0 + Bcal V + Rvec.
    """
    N, n_x, n_u = blocks.N, blocks.n_x, blocks.n_u
    scale = spec.weights.scale
    Qx = spec.weights.Qx
    Qu = spec.weights.Qu
    Py = blocks.Py
    B = blocks.Bcal

    n_V = N * n_u
    n_k = N * n_u * n_x
    rows, cols = kvec_indices(N, n_u, n_x)

    # trace term: tr{QxPy} + 2 tr{QxBKPy} + tr{K^T(B^TQxB+Qu)KPy}
    S = B.T @ Qx @ B + Qu
    lin_K_full = 2.0 * (B.T @ Qx @ Py)
    H_kk = 2.0 * scale * S[np.ix_(rows, rows)] * Py[np.ix_(cols, cols)]
    g_k = scale * lin_K_full[rows, cols]
    const = scale * float(np.trace(Qx @ Py))

    # running mean cost along the mean trajectory
    mc = spec.mean_cost
    quad_u = np.asarray(mc.quad_u, dtype=float)
    quad_x = np.asarray(mc.quad_x, dtype=float)
    lin_u = np.asarray(mc.lin_u, dtype=float)
    lin_x = np.asarray(mc.lin_x, dtype=float)
    for M, dim, name in ((quad_u, n_u, "quad_u"), (quad_x, n_x, "quad_x")):
        if M.shape != (dim, dim):
            raise ValueError(f"mean cost {name} has shape {M.shape}")
        if np.linalg.norm(M - M.T) > 1e-10 * (1 + np.linalg.norm(M)) or \
                np.linalg.eigvalsh(M).min() < -1e-10:
            raise ValueError(f"mean cost {name} must be symmetric PSD")
    x_ref = np.asarray(mc.x_ref, dtype=float)
    if x_ref.ndim == 1:
        x_ref = np.tile(x_ref, (N, 1))
    if x_ref.shape != (N, n_x):
        raise ValueError(f"mean cost x_ref has shape {x_ref.shape}, expected ({N}, {n_x})")

    base = blocks.Acal @ spec.x0_mean + blocks.Rvec
    H_V = np.zeros((n_V, n_V))
    g_V = np.zeros(n_V)
    for k in range(N):
        su = slice(k * n_u, (k + 1) * n_u)
        Bk = B[k * n_x:(k + 1) * n_x, :]
        mk = base[k * n_x:(k + 1) * n_x]
        H_V[su, su] += 2.0 * scale * quad_u
        H_V += 2.0 * scale * (Bk.T @ quad_x @ Bk)
        dx = mk - x_ref[k]
        g_V += scale * (2.0 * Bk.T @ quad_x @ dx + Bk.T @ lin_x)
        g_V[su] += scale * lin_u
        const += scale * float(dx @ quad_x @ dx + lin_x @ mk)

    H = np.zeros((n_V + n_k, n_V + n_k))
    H[:n_V, :n_V] = H_V
    H[n_V:, n_V:] = H_kk
    g = np.concatenate([g_V, g_k])
    return QuadraticObjective(H=H, g=g, const=const, eta_weight=spec.w_xf,
                              n_V=n_V, n_k=n_k)


def evaluate_cost(blocks: BlockSystem, spec: CSProblemSpec, V, K, eta=0.0) -> float:
    """Direct evaluation of the subproblem cost from full matrices (oracle path)."""
    K = np.asarray(K, dtype=float)
    V = np.asarray(V, dtype=float).ravel()
    scale = spec.weights.scale
    I = np.eye(blocks.Py.shape[0])
    M = I + blocks.Bcal @ K
    trace = float(np.trace((M.T @ spec.weights.Qx @ M + K.T @ spec.weights.Qu @ K) @ blocks.Py))
    xbar = blocks.mean_states(spec.x0_mean, V)
    mc = spec.mean_cost
    x_ref = np.asarray(mc.x_ref, dtype=float)
    if x_ref.ndim == 1:
        x_ref = np.tile(x_ref, (blocks.N, 1))
    L = 0.0
    for k in range(blocks.N):
        u = V[k * blocks.n_u:(k + 1) * blocks.n_u]
        x = xbar[k * blocks.n_x:(k + 1) * blocks.n_x]
        dx = x - x_ref[k]
        L += float(u @ mc.quad_u @ u + dx @ mc.quad_x @ dx
                   + np.dot(mc.lin_u, u) + np.dot(mc.lin_x, x))
    return scale * (L + trace) + spec.w_xf * eta


# ---------------------------------------------------------------------------
# constraint rows


@dataclass(frozen=True)
class NormRow:
    """One probabilistic half-space row.

    Encodes  normal^T (mean at step k) - offset
             + quantile(1 - risk) * || Py^{1/2} (closed-loop map)^T E_k^T normal || <= 0.
    ``family`` is "state" or "control", ``tag`` distinguishes user chance
    rows from trust-region rows.
    """

    family: str
    k: int
    normal: np.ndarray
    offset: float
    risk: float
    tag: str = "chance"

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).ravel())
        if self.risk >= 0.5 or self.risk <= 0.0:
            raise ValueError("row risk must lie in (0, 0.5) for a convex reformulation")


def build_chance_constraints(blocks: BlockSystem, spec: CSProblemSpec,
                             offset_scale: float = 1.0) -> list:
    """User half-space constraints as NormRows, offsets optionally relaxed.

    ``offset_scale`` > 1 enlarges half-spaces with positive offsets (the
    homotopy used on early iterations); rows with nonpositive offsets are
    left unscaled since scaling would not enlarge them.
    """
    state, control = spec.constraints_for(blocks.N)
    rows = []
    for k, hs_list in enumerate(state):
        for hs in hs_list:
            if hs.normal.shape != (blocks.n_x,):
                raise ValueError(f"state half-space at step {k} has dimension "
                                 f"{hs.normal.shape[0]}, expected {blocks.n_x}")
            off = hs.offset * offset_scale if hs.offset > 0 else hs.offset
            rows.append(NormRow("state", k, hs.normal, off, hs.risk))
    for k, hs_list in enumerate(control):
        for hs in hs_list:
            if hs.normal.shape != (blocks.n_u,):
                raise ValueError(f"control half-space at step {k} has dimension "
                                 f"{hs.normal.shape[0]}, expected {blocks.n_u}")
            off = hs.offset * offset_scale if hs.offset > 0 else hs.offset
            rows.append(NormRow("control", k, hs.normal, off, hs.risk))
    return rows


def build_trust_region(blocks: BlockSystem, spec: CSProblemSpec, ref) -> list:
    """Componentwise probabilistic trust region about the reference.

    Each state (control) component contributes two half-spaces per step at
    per-row risk p_tr/(2 n); the rows then flow through the same machinery
    as ordinary chance constraints.
    """
    tr = spec.trust_region
    if tr is None:
        return []
    rows = []
    risk_x = tr.p_tr_x / (2 * blocks.n_x)
    risk_u = tr.p_tr_u / (2 * blocks.n_u)
    for k in range(blocks.N + 1):
        xk = ref.x_hat[k]
        for j in range(blocks.n_x):
            e = np.zeros(blocks.n_x)
            for sign in (1.0, -1.0):
                e_s = sign * np.eye(blocks.n_x)[j]
                rows.append(NormRow("state", k, e_s, tr.delta_x + sign * xk[j],
                                    risk_x, tag="trust"))
    for k in range(blocks.N):
        uk = ref.u_hat[k]
        for j in range(blocks.n_u):
            for sign in (1.0, -1.0):
                e_s = sign * np.eye(blocks.n_u)[j]
                rows.append(NormRow("control", k, e_s, tr.delta_u + sign * uk[j],
                                    risk_u, tag="trust"))
    return rows


def relaxation_scale_needed(blocks: BlockSystem, spec: CSProblemSpec,
                            x_mean: np.ndarray, u_ref: np.ndarray) -> float:
    """Smallest offset scale >= 1 making the reference mean feasible with margin.

    Only rows with positive offsets can be enlarged by scaling; others are
    ignored here.
    """
    margin = spec.relaxation.margin
    state, control = spec.constraints_for(blocks.N)
    s = 1.0
    x_mean = np.atleast_2d(x_mean)
    u_ref = np.atleast_2d(u_ref)
    for k, hs_list in enumerate(state):
        for hs in hs_list:
            if hs.offset > 0:
                val = float(hs.normal @ x_mean[k])
                if val > 0:
                    s = max(s, margin * val / hs.offset)
    for k, hs_list in enumerate(control):
        for hs in hs_list:
            if hs.offset > 0:
                val = float(hs.normal @ u_ref[k])
                if val > 0:
                    s = max(s, margin * val / hs.offset)
    return s


def chance_row_margin(blocks: BlockSystem, spec: CSProblemSpec, row: NormRow,
                      V, K) -> float:
    """Left-hand side of a NormRow at a concrete policy (<= 0 when satisfied)."""
    V = np.asarray(V, dtype=float).ravel()
    K = np.asarray(K, dtype=float)
    coef = inverse_normal_cdf(1.0 - row.risk)
    n_x, n_u = blocks.n_x, blocks.n_u
    if row.family == "state":
        rows_k = slice(row.k * n_x, (row.k + 1) * n_x)
        mean = float(row.normal @ blocks.mean_states(spec.x0_mean, V)[rows_k])
        closed = np.eye(blocks.Py.shape[0]) + blocks.Bcal @ K
        vec = blocks.Py_sqrt @ closed.T[:, rows_k] @ row.normal
    else:
        mean = float(row.normal @ V[row.k * n_u:(row.k + 1) * n_u])
        vec = blocks.Py_sqrt @ K.T[:, row.k * n_u:(row.k + 1) * n_u] @ row.normal
    return mean - row.offset + coef * float(np.linalg.norm(vec))


# ---------------------------------------------------------------------------
# terminal constraints


@dataclass(frozen=True)
class TerminalMean:
    """Final mean residual h(V) = E_N(Acal x0 + Bcal V + Rvec) - xf.

    ``mode`` is "hard" (equality rows) or "soft" (norm of the residual
    bounded by the slack eta, which the cost penalizes).
    """

    mode: str
    coef_V: np.ndarray   # n_x by N n_u
    const: np.ndarray    # n_x

    def residual(self, V) -> np.ndarray:
        return self.coef_V @ np.asarray(V, dtype=float).ravel() + self.const


def build_terminal_mean(blocks: BlockSystem, spec: CSProblemSpec,
                        mode: str) -> TerminalMean:
    if mode not in ("hard", "soft"):
        raise ValueError(f"terminal mean mode must be hard or soft, got {mode!r}")
    n_x = blocks.n_x
    EN = slice(blocks.N * n_x, (blocks.N + 1) * n_x)
    base = blocks.Acal @ spec.x0_mean + blocks.Rvec
    return TerminalMean(mode=mode, coef_V=blocks.Bcal[EN, :].copy(),
                        const=base[EN] - spec.xf_mean)


@dataclass(frozen=True)
class TerminalCovariance:
    """Terminal covariance bound as the Schur-complement LMI.

    The constraint E_N (I + Bcal K) Py (I + Bcal K)^T E_N^T <= P_xf is
    encoded as [[P_xf, M(K)], [M(K)^T, I]] >= 0 with
    M(K) = E_N (I + Bcal K) Py^{1/2}, affine in K.
    """

    P_xf: np.ndarray
    M0: np.ndarray       # E_N Py^{1/2}
    coef_EB: np.ndarray  # E_N Bcal
    Py_sqrt: np.ndarray

    def M(self, K) -> np.ndarray:
        return self.M0 + self.coef_EB @ np.asarray(K, dtype=float) @ self.Py_sqrt

    def lmi_matrix(self, K) -> np.ndarray:
        M = self.M(K)
        n_x, L = M.shape
        S = np.zeros((n_x + L, n_x + L))
        S[:n_x, :n_x] = self.P_xf
        S[:n_x, n_x:] = M
        S[n_x:, :n_x] = M.T
        S[n_x:, n_x:] = np.eye(L)
        return S

    def margin(self, blocks: BlockSystem, K) -> float:
        """lambda_min(P_xf - E_N Px E_N^T); nonnegative when satisfied."""
        from .blocks import state_covariance
        n_x = self.P_xf.shape[0]
        EN = slice(blocks.N * n_x, (blocks.N + 1) * n_x)
        Pf = state_covariance(blocks, np.asarray(K, dtype=float))[EN, EN]
        return float(np.linalg.eigvalsh(self.P_xf - Pf).min())


def build_terminal_cov(blocks: BlockSystem, spec: CSProblemSpec) -> TerminalCovariance:
    if np.linalg.eigvalsh(spec.P_xf).min() <= 0:
        raise ValueError("P_xf must be positive definite")
    n_x = blocks.n_x
    EN = slice(blocks.N * n_x, (blocks.N + 1) * n_x)
    return TerminalCovariance(P_xf=spec.P_xf, M0=blocks.Py_sqrt[EN, :].copy(),
                              coef_EB=blocks.Bcal[EN, :].copy(),
                              Py_sqrt=blocks.Py_sqrt)


# ---------------------------------------------------------------------------
# lowering to a cone program


class _Triplets:
    """Vectorized COO accumulator."""

    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        keep = vals != 0.0
        self.rows.append(rows[keep])
        self.cols.append(cols[keep])
        self.vals.append(vals[keep])

    def add_dense(self, row0, col_idx, block):
        """Dense block whose (i, t) entry couples row0+i with col_idx[t]."""
        block = np.atleast_2d(np.asarray(block, dtype=float))
        nr, nc = block.shape
        rows = np.repeat(np.arange(row0, row0 + nr), nc)
        cols = np.tile(np.asarray(col_idx, dtype=np.int64), nr)
        self.add(rows, cols, block.ravel())

    def build(self, shape):
        rows = np.concatenate(self.rows) if self.rows else np.empty(0, dtype=np.int64)
        cols = np.concatenate(self.cols) if self.cols else np.empty(0, dtype=np.int64)
        vals = np.concatenate(self.vals) if self.vals else np.empty(0)
        return scipy.sparse.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()


@dataclass
class LoweredSubproblem:
    """Cone program plus the variable layout needed to read a solution back."""

    program: ConicProgram
    n_V: int
    n_k: int
    eta_index: int
    t_obj_index: int
    objective_const: float
    N: int
    n_u: int
    n_x: int
    norm_aux: int

    def extract(self, primal: np.ndarray):
        V = primal[:self.n_V].copy()
        kvec = primal[self.n_V:self.n_V + self.n_k]
        K_blocks = kvec.reshape(self.N, self.n_u, self.n_x).copy()
        eta = float(primal[self.eta_index])
        return V, K_blocks, eta

    def objective_value(self, primal: np.ndarray) -> float:
        return float(self.program.c @ primal + self.objective_const)


def lower(blocks: BlockSystem, spec: CSProblemSpec, objective: QuadraticObjective,
          rows: Sequence[NormRow], terminal_mode: str = "soft",
          include_terminal_cov: bool = True) -> LoweredSubproblem:
    """Stack objective and constraints into a standard-form cone program.

    Variable order: V, kvec, eta, objective epigraph t, then one norm
    auxiliary per distinct half-space direction; rows whose norm terms are
    sign-identical share one auxiliary and one second-order cone.  Row
    order: zero cone (hard terminal mean), nonnegative cone (eta, then the
    scalar half-space rows in build order), second-order cones (objective
    epigraph, soft terminal mean, norm cones in first-use order), then the
    terminal covariance LMI in the PSD cone.
    """
    if terminal_mode not in ("soft", "hard"):
        raise ValueError(f"lower expects resolved mode soft|hard, got {terminal_mode!r}")
    N, n_x, n_u = blocks.N, blocks.n_x, blocks.n_u
    n_V, n_k = objective.n_V, objective.n_k
    L = (N + 1) * n_x
    Py_sqrt = blocks.Py_sqrt
    B = blocks.Bcal

    # eigen factor W with 0.5 z^T H z = ||W z||^2
    w_eig, U = np.linalg.eigh(0.5 * (objective.H + objective.H.T))
    lam_max = max(w_eig.max(), 0.0) if w_eig.size else 0.0
    keep = w_eig > max(lam_max, 1.0) * 1e-14
    W = np.sqrt(0.5 * w_eig[keep])[:, None] * U[:, keep].T
    r_obj = W.shape[0]

    kv_rows, kv_cols = kvec_indices(N, n_u, n_x)
    x0_base = blocks.Acal @ spec.x0_mean + blocks.Rvec
    tmean = build_terminal_mean(blocks, spec, terminal_mode)

    # dedupe norm directions: rows sharing (family, k, +-normal) share one cone
    unique = {}
    order = []
    row_aux = []
    for row in rows:
        nz = np.nonzero(row.normal)[0]
        flip = -1.0 if row.normal[nz[0]] < 0 else 1.0
        key = (row.family, row.k, (flip * row.normal).tobytes())
        if key not in unique:
            unique[key] = len(unique)
            order.append((row.family, row.k, flip * row.normal))
        row_aux.append(unique[key])
    n_aux = len(unique)

    n_vars = n_V + n_k + 1 + 1 + n_aux
    eta_idx = n_V + n_k
    t_obj_idx = eta_idx + 1
    aux0 = t_obj_idx + 1

    tri = _Triplets()
    bparts = []
    cones = []
    nrow = 0

    def add_cone(kind, count):
        nonlocal nrow
        start = nrow
        nrow += count
        cones.append((kind, count))
        return start

    if terminal_mode == "hard":
        start = add_cone("zero", n_x + 1)
        tri.add_dense(start, np.arange(n_V), tmean.coef_V)
        tri.add([start + n_x], [eta_idx], [1.0])
        bparts.append(-tmean.const)
        bparts.append([0.0])

    # nonnegative rows: eta >= 0, then one scalar row per NormRow
    nn_start = add_cone("nonneg", 1 + len(rows))
    tri.add([nn_start], [eta_idx], [-1.0])
    bparts.append([0.0])
    b_nn = np.zeros(len(rows))
    for r, row in enumerate(rows):
        i = nn_start + 1 + r
        coef = inverse_normal_cdf(1.0 - row.risk)
        if row.family == "state":
            rows_k = slice(row.k * n_x, (row.k + 1) * n_x)
            sV = B[rows_k, :].T @ row.normal
            s_const = float(row.normal @ x0_base[rows_k]) - row.offset
        else:
            sV = np.zeros(n_V)
            sV[row.k * n_u:(row.k + 1) * n_u] = row.normal
            s_const = -row.offset
        tri.add_dense(i, np.arange(n_V), sV[None, :])
        tri.add([i], [aux0 + row_aux[r]], [coef])
        b_nn[r] = -s_const
    bparts.append(b_nn)

    # objective epigraph: ||(2 W z, t - 1)|| <= t + 1  <=>  ||W z||^2 <= t
    start = add_cone("soc", r_obj + 2)
    tri.add([start], [t_obj_idx], [-1.0])
    tri.add_dense(start + 1, np.arange(n_V + n_k), -2.0 * W)
    tri.add([start + 1 + r_obj], [t_obj_idx], [-1.0])
    bparts.append([1.0])
    bparts.append(np.zeros(r_obj))
    bparts.append([-1.0])

    if terminal_mode == "soft":
        start = add_cone("soc", n_x + 1)
        tri.add([start], [eta_idx], [-1.0])
        tri.add_dense(start + 1, np.arange(n_V), -tmean.coef_V)
        bparts.append([0.0])
        bparts.append(tmean.const)

    # one SOC per distinct direction: t_aux >= ||Py^{1/2} map^T E_k^T a||
    for aux_id, (family, k, normal) in enumerate(order):
        start = add_cone("soc", L + 1)
        tri.add([start], [aux0 + aux_id], [-1.0])
        bparts.append([0.0])
        if family == "state":
            rows_k = slice(k * n_x, (k + 1) * n_x)
            vec_const = Py_sqrt[:, rows_k] @ normal
            wv = B[rows_k, :].T @ normal
        else:
            vec_const = np.zeros(L)
            wv = np.zeros(N * n_u)
            wv[k * n_u:(k + 1) * n_u] = normal
        bparts.append(vec_const)
        sel = np.nonzero(wv[kv_rows])[0]
        if len(sel):
            Cblock = Py_sqrt[:, kv_cols[sel]] * wv[kv_rows[sel]][None, :]
            tri.add_dense(start + 1, n_V + sel, -Cblock)

    if include_terminal_cov:
        tcov = build_terminal_cov(blocks, spec)
        d = n_x + L
        svec_dim = d * (d + 1) // 2
        start = add_cone("psd", svec_dim)
        bparts.append(svec(tcov.lmi_matrix(np.zeros((N * n_u, L)))))
        # svec position of strict-upper entry (i, n_x + j)
        first = np.cumsum(np.concatenate([[0], np.arange(d, 1, -1)]))
        svec_pos = first[:n_x, None] + (np.arange(L)[None, :] + n_x
                                        - np.arange(n_x)[:, None])
        root2 = np.sqrt(2.0)
        ENB = tcov.coef_EB
        for idx in range(n_k):
            p, q = kv_rows[idx], kv_cols[idx]
            coefs = -root2 * np.outer(ENB[:, p], Py_sqrt[q, :])
            tri.add(start + svec_pos.ravel(), np.full(n_x * L, n_V + idx), coefs.ravel())

    A = tri.build((nrow, n_vars))
    b = np.concatenate([np.asarray(p, dtype=float).ravel() for p in bparts])

    c = np.zeros(n_vars)
    c[:n_V + n_k] = objective.g
    c[eta_idx] = objective.eta_weight if terminal_mode == "soft" else 0.0
    c[t_obj_idx] = 1.0

    prog = ConicProgram(c=c, A=A, b=b, cones=tuple(cones))
    return LoweredSubproblem(program=prog, n_V=n_V, n_k=n_k, eta_index=eta_idx,
                             t_obj_index=t_obj_idx, objective_const=objective.const,
                             N=N, n_u=n_u, n_x=n_x, norm_aux=n_aux)
