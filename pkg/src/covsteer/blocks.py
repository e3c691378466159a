"""Concatenated linear-Gaussian system over the whole horizon.

Stacks the per-step matrices into the single linear equation

    X = Acal x_0 + Bcal U + Rvec + sqrt(sigma) Gcal W,

and precomputes the covariance Py of the zero-mean process driving the
feedback, together with its symmetric square root, which every constraint
builder reuses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretization import LinearizedStep, psd_sqrt


@dataclass(frozen=True)
class BlockSystem:
    """Concatenated system matrices and shared covariance factors.

    Acal: (N+1)n_x by n_x, Bcal: (N+1)n_x by N n_u, Gcal: (N+1)n_x by N n_x,
    Rvec: (N+1)n_x.  Py = Acal P_x0 Acal^T + sigma Gcal Gcal^T and Py_sqrt
    is its symmetric PSD square root.
    """

    Acal: np.ndarray
    Bcal: np.ndarray
    Gcal: np.ndarray
    Rvec: np.ndarray
    Py: np.ndarray
    Py_sqrt: np.ndarray
    sigma: float
    N: int
    n_x: int
    n_u: int
    P_x0: np.ndarray
    steps: tuple[LinearizedStep, ...]

    def mean_states(self, x0_mean: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Stacked mean trajectory Acal x0 + Bcal V + Rvec."""
        return self.Acal @ np.asarray(x0_mean, float) + self.Bcal @ np.asarray(V, float) + self.Rvec


def assemble(steps, sigma: float, P_x0) -> BlockSystem:
    """Stack per-step matrices into the whole-horizon linear system."""
    steps = tuple(steps)
    N = len(steps)
    if N < 1:
        raise ValueError("need at least one step")
    n_x = steps[0].A_k.shape[0]
    n_u = steps[0].B_k.shape[1]
    P_x0 = np.asarray(P_x0, dtype=float)
    if P_x0.shape != (n_x, n_x):
        raise ValueError(f"P_x0 has shape {P_x0.shape}, expected ({n_x}, {n_x})")
    if np.linalg.norm(P_x0 - P_x0.T) > 1e-10 * (1.0 + np.linalg.norm(P_x0)):
        raise ValueError("P_x0 must be symmetric")
    ev_min = np.linalg.eigvalsh(P_x0).min()
    if ev_min < -1e-10 * (1.0 + abs(np.linalg.eigvalsh(P_x0).max())):
        raise ValueError("P_x0 must be positive semidefinite")

    Acal = np.zeros(((N + 1) * n_x, n_x))
    Bcal = np.zeros(((N + 1) * n_x, N * n_u))
    Gcal = np.zeros(((N + 1) * n_x, N * n_x))
    Rvec = np.zeros((N + 1) * n_x)

    # row k + 1 follows from row k through one application of A_k
    Acal[0:n_x] = np.eye(n_x)
    for k, st in enumerate(steps):
        rows_prev = slice(k * n_x, (k + 1) * n_x)
        rows_next = slice((k + 1) * n_x, (k + 2) * n_x)
        Acal[rows_next] = st.A_k @ Acal[rows_prev]
        Bcal[rows_next] = st.A_k @ Bcal[rows_prev]
        Bcal[rows_next, k * n_u:(k + 1) * n_u] = st.B_k
        Gcal[rows_next] = st.A_k @ Gcal[rows_prev]
        Gcal[rows_next, k * n_x:(k + 1) * n_x] = st.G_k
        Rvec[rows_next] = st.A_k @ Rvec[rows_prev] + st.r_k

    Py = Acal @ P_x0 @ Acal.T + sigma * (Gcal @ Gcal.T)
    Py = 0.5 * (Py + Py.T)
    return BlockSystem(Acal=Acal, Bcal=Bcal, Gcal=Gcal, Rvec=Rvec,
                       Py=Py, Py_sqrt=psd_sqrt(Py), sigma=float(sigma),
                       N=N, n_x=n_x, n_u=n_u, P_x0=P_x0, steps=steps)


def selector_x(k: int, N: int, n_x: int) -> np.ndarray:
    """E_k with x_k = E_k X, shape n_x by (N+1) n_x."""
    if not 0 <= k <= N:
        raise IndexError(f"state index {k} out of range [0, {N}]")
    E = np.zeros((n_x, (N + 1) * n_x))
    E[:, k * n_x:(k + 1) * n_x] = np.eye(n_x)
    return E


def selector_u(k: int, N: int, n_u: int) -> np.ndarray:
    """E_k^u with u_k = E_k^u U, shape n_u by N n_u."""
    if not 0 <= k < N:
        raise IndexError(f"control index {k} out of range [0, {N})")
    E = np.zeros((n_u, N * n_u))
    E[:, k * n_u:(k + 1) * n_u] = np.eye(n_u)
    return E


@dataclass(frozen=True)
class CostWeights:
    """Block-diagonal quadratic weights with the terminal state block zeroed."""

    Qx_blocks: tuple[np.ndarray, ...]
    Qu_blocks: tuple[np.ndarray, ...]
    scale: float

    @property
    def Qx(self) -> np.ndarray:
        n_x = self.Qx_blocks[0].shape[0]
        N = len(self.Qu_blocks)
        out = np.zeros(((N + 1) * n_x, (N + 1) * n_x))
        for k, Q in enumerate(self.Qx_blocks):
            out[k * n_x:(k + 1) * n_x, k * n_x:(k + 1) * n_x] = Q
        return out

    @property
    def Qu(self) -> np.ndarray:
        n_u = self.Qu_blocks[0].shape[0]
        N = len(self.Qu_blocks)
        out = np.zeros((N * n_u, N * n_u))
        for k, Q in enumerate(self.Qu_blocks):
            out[k * n_u:(k + 1) * n_u, k * n_u:(k + 1) * n_u] = Q
        return out


def assemble_cost_weights(Qx, Qu, sigma: float, N: int) -> CostWeights:
    """Per-step weights -> block weights, terminal state block zero, scale sigma/N.

    ``Qx`` and ``Qu`` may each be a single matrix (held constant) or a
    length-N sequence of matrices.  Qx blocks must be positive definite,
    Qu blocks positive semidefinite.
    """
    Qx_list = _per_step(Qx, N)
    Qu_list = _per_step(Qu, N)
    for k, Q in enumerate(Qx_list):
        if np.linalg. eigvalsh(Q).min() <= 0:
            raise ValueError(f"Qx block {k} must be positive definite")
    for k, Q in enumerate(Qu_list):
        if np.linalg.eigvalsh(Q).min() < -1e-12:
            raise ValueError(f"Qu block {k} must be positive semidefinite")
    n_x = Qx_list[0].shape[0]
    return CostWeights(Qx_blocks=tuple(Qx_list) + (np.zeros((n_x, n_x)),),
                       Qu_blocks=tuple(Qu_list), scale=sigma / N)


def _per_step(Q, N):
    Q = [np.asarray(q, dtype=float) for q in Q] if isinstance(Q, (list, tuple)) \
        else [np.asarray(Q, dtype=float)] * N
    if len(Q) != N:
        raise ValueError(f"expected {N} weight blocks, got {len(Q)}")
    for q in Q:
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("weight blocks must be square matrices")
        if np.linalg.norm(q - q.T) > 1e-10 * (1.0 + np.linalg.norm(q)):
            raise ValueError("weight blocks must be symmetric")
    return Q


def state_covariance(blocks: BlockSystem, K: np.ndarray) -> np.ndarray:
    """Covariance of the stacked state under feedback, (I + Bcal K) Py (.)^T."""
    M = np.eye(blocks.Py.shape[0]) + blocks.Bcal @ K
    return M @ blocks.Py @ M.T


def control_covariance(blocks: BlockSystem, K: np.ndarray) -> np.ndarray:
    """Covariance of the stacked control under feedback, K Py K^T."""
    return K @ blocks.Py @ K.T
