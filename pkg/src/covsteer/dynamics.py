"""Continuous-time stochastic models: drift, Jacobians, diffusion.

A model describes the controlled SDE

    dx = f(x, u, t) dt + G(t) dw,

with additive Brownian noise.  Models are plain containers of callables so
that evaluation is pure and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ModelSpec:
    """Nonlinear stochastic model with analytic Jacobians.

    ``drift(x, u, t)`` returns the state rate, ``jac_x``/``jac_u`` its
    Jacobians at the same point, and ``diffusion(t)`` the n_x-by-n_w noise
    input matrix.  Jacobians may be omitted (``None``); a central
    finite-difference fallback is substituted.
    """

    n_x: int
    n_u: int
    n_w: int
    drift: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    jac_x: Callable[[np.ndarray, np.ndarray, float], np.ndarray] = None
    jac_u: Callable[[np.ndarray, np.ndarray, float], np.ndarray] = None
    diffusion: Callable[[float], np.ndarray] = None
    drift_batch: Callable[[np.ndarray, np.ndarray, float], np.ndarray] = None

    def __post_init__(self):
        if self.n_x < 1 or self.n_u < 0 or self.n_w < 0:
            raise ValueError("dimensions must be positive")
        if self.jac_x is None:
            object.__setattr__(self, "jac_x", _fd_jacobian(self.drift, 0, self.n_x))
        if self.jac_u is None:
            object.__setattr__(self, "jac_u", _fd_jacobian(self.drift, 1, self.n_u))
        if self.diffusion is None:
            zero = np.zeros((self.n_x, max(self.n_w, 1)))
            object.__setattr__(self, "diffusion", lambda t, _z=zero: _z)
        if self.drift_batch is None:
            f = self.drift
            object.__setattr__(
                self, "drift_batch",
                lambda X, U, t: np.stack([f(x, u, t) for x, u in zip(X, U)]))


def _check_args(model: ModelSpec, x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.n_x,):
        raise ValueError(f"state has shape {x.shape}, expected ({model.n_x},)")
    if u.shape != (model.n_u,):
        raise ValueError(f"control has shape {u.shape}, expected ({model.n_u},)")
    return x, u


def drift(model: ModelSpec, x, u, t=0.0) -> np.ndarray:
    """Evaluate the drift f(x, u, t) with dimension checks."""
    x, u = _check_args(model, x, u)
    out = np.asarray(model.drift(x, u, t), dtype=float)
    if out.shape != (model.n_x,):
        raise ValueError(f"drift returned shape {out.shape}, expected ({model.n_x},)")
    return out


def jacobian_x(model: ModelSpec, x, u, t=0.0) -> np.ndarray:
    """State Jacobian of the drift, n_x by n_x."""
    x, u = _check_args(model, x, u)
    return np.asarray(model.jac_x(x, u, t), dtype=float).reshape(model.n_x, model.n_x)


def jacobian_u(model: ModelSpec, x, u, t=0.0) -> np.ndarray:
    """Control Jacobian of the drift, n_x by n_u."""
    x, u = _check_args(model, x, u)
    return np.asarray(model.jac_u(x, u, t), dtype=float).reshape(model.n_x, model.n_u)


def _fd_jacobian(f, argnum, dim):
    """Central finite-difference Jacobian in argument ``argnum`` of f(x, u, t)."""

    def jac(x, u, t):
        args = [np.asarray(x, dtype=float), np.asarray(u, dtype=float)]
        base = args[argnum]
        h = 1e-5 * (1.0 + np.max(np.abs(base), initial=0.0))
        cols = []
        for j in range(dim):
            hi = base.copy()
            lo = base.copy()
            hi[j] += h
            lo[j] -= h
            args_hi = list(args)
            args_lo = list(args)
            args_hi[argnum] = hi
            args_lo[argnum] = lo
            cols.append((np.asarray(f(args_hi[0], args_hi[1], t), dtype=float)
                         - np.asarray(f(args_lo[0], args_lo[1], t), dtype=float)) / (2 * h))
        return np.column_stack(cols) if cols else np.zeros((len(base), 0))

    return jac


def finite_difference_jacobians(model: ModelSpec, x, u, t=0.0):
    """Central-difference (jac_x, jac_u) of the model drift, for checking."""
    fx = _fd_jacobian(model.drift, 0, model.n_x)(np.asarray(x, float), np.asarray(u, float), t)
    fu = _fd_jacobian(model.drift, 1, model.n_u)(np.asarray(x, float), np.asarray(u, float), t)
    return fx, fu


@dataclass(frozen=True)
class DragDoubleIntegrator:
    """Planar double integrator with quadratic drag and velocity noise.

    State layout (xi1, xi2, v1, v2).  The drift is [v; u - c_d*||v||*v] and
    the diffusion injects gamma-scaled white noise into the velocity rows
    only.  At v = 0 the drag Jacobian is defined by its limit, zero.
    """

    c_d: float = 0.005
    gamma: float = 0.01

    def __post_init__(self):
        if self.c_d < 0:
            raise ValueError("c_d must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def A(self) -> np.ndarray:
        A = np.zeros((4, 4))
        A[0, 2] = A[1, 3] = 1.0
        return A

    @property
    def B(self) -> np.ndarray:
        B = np.zeros((4, 2))
        B[2, 0] = B[3, 1] = 1.0
        return B

    def drift(self, x, u, t=0.0):
        v = x[2:4]
        return np.concatenate([v, u - self.c_d * np.linalg.norm(v) * v])

    def drift_batch(self, X, U, t=0.0):
        V = X[:, 2:4]
        speed = np.linalg.norm(V, axis=1, keepdims=True)
        return np.hstack([V, U - self.c_d * speed * V])

    def jac_x(self, x, u, t=0.0):
        J = self.A.copy()
        v = x[2:4]
        speed = np.linalg.norm(v)
        if speed > 0.0:
            J[2:4, 2:4] -= self.c_d * (np.outer(v, v) / speed + speed * np.eye(2))
        return J

    def jac_u(self, x, u, t=0.0):
        return self.B.copy()

    def diffusion(self, t=0.0):
        G = np.zeros((4, 2))
        G[2, 0] = G[3, 1] = self.gamma
        return G

    def as_model(self) -> ModelSpec:
        return ModelSpec(n_x=4, n_u=2, n_w=2, drift=self.drift,
                         jac_x=self.jac_x, jac_u=self.jac_u,
                         diffusion=self.diffusion, drift_batch=self.drift_batch)


def linear_model(A, B, G=None, r=None) -> ModelSpec:
    """Affine model dx = (Ax + Bu + r)dt + G dw, handy for tests and oracles."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n_x, n_u = A.shape[0], B.shape[1]
    if G is None:
        G = np.zeros((n_x, 1))
    G = np.asarray(G, dtype=float)
    r0 = np.zeros(n_x) if r is None else np.asarray(r, dtype=float)
    return ModelSpec(
        n_x=n_x, n_u=n_u, n_w=G.shape[1],
        drift=lambda x, u, t: A @ x + B @ u + r0,
        jac_x=lambda x, u, t: A,
        jac_u=lambda x, u, t: B,
        diffusion=lambda t: G,
        drift_batch=lambda X, U, t: X @ A.T + U @ B.T + r0,
    )
