"""Time normalization, linearization about a reference, and discretization.

The continuous system is rescaled to normalized time tau in [0, 1] with
dilation sigma = t_f - t_0, linearized about a reference trajectory, and
reduced to per-step matrices (A_k, B_k, r_k, G_k).  Both the exact
zero-order-hold discretization (state-transition-matrix integrals, solved
by fixed-step RK4) and the usual first-order approximation are provided.

Convention: G_k satisfies G_k G_k^T = Sigma_k with Sigma_k the integral of
Phi G G^T Phi^T over the step, i.e. the dilation enters the one-step noise
as sqrt(sigma) * G_k * w_k and the concatenated covariance downstream as
sigma * Gcal Gcal^T.  Both schemes share this convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ModelSpec, drift as eval_drift, jacobian_x, jacobian_u


class NumericalFailure(RuntimeError):
    """Non-finite values encountered during numerical integration."""


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Reference (x_hat, u_hat) on the uniform normalized-time grid.

    x_hat has N+1 rows, u_hat N rows (zero-order hold), sigma is the
    physical duration represented by tau in [0, 1].
    """

    x_hat: np.ndarray
    u_hat: np.ndarray
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "x_hat", np.atleast_2d(np.asarray(self.x_hat, dtype=float)))
        object.__setattr__(self, "u_hat", np.atleast_2d(np.asarray(self.u_hat, dtype=float)))
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.N < 1:
            raise ValueError("need at least one step")
        if self.x_hat.shape[0] != self.N + 1:
            raise ValueError("x_hat must have one more row than u_hat")

    @property
    def N(self) -> int:
        return self.u_hat.shape[0]

    def sample(self, tau: float):
        """Reference point at tau: linear interpolation in x, ZOH in u."""
        if not 0.0 <= tau <= 1.0 + 1e-12:
            raise ValueError("tau must lie in [0, 1]")
        s = min(max(tau, 0.0), 1.0) * self.N
        k = min(int(np.floor(s)), self.N - 1)
        w = s - k
        x = (1.0 - w) * self.x_hat[k] + w * self.x_hat[k + 1]
        return x, self.u_hat[k]


@dataclass(frozen=True)
class ContinuousLinearization:
    """Normalized-time linearization at one reference point."""

    A_tau: np.ndarray
    B_tau: np.ndarray
    r_tau: np.ndarray


@dataclass(frozen=True)
class LinearizedStep:
    """One step of the discrete linear-Gaussian approximation.

    The step map is x_{k+1} = A_k x_k + B_k u_k + r_k + sqrt(sigma) G_k w_k
    with w_k standard normal and G_k G_k^T = Sigma_k.
    """

    A_k: np.ndarray
    B_k: np.ndarray
    r_k: np.ndarray
    G_k: np.ndarray
    Sigma_k: np.ndarray


def linearize(model: ModelSpec, ref: ReferenceTrajectory, tau: float) -> ContinuousLinearization:
    """Linearize the dilated dynamics about the reference at tau.

    Returns A_tau = sigma * df/dx, B_tau = sigma * df/du and the affine
    residual r_tau = sigma * f - A_tau x_hat - B_tau u_hat, all evaluated
    at the interpolated reference point.
    """
    x_hat, u_hat = ref.sample(tau)
    s = ref.sigma
    A = s * jacobian_x(model, x_hat, u_hat, tau)
    B = s * jacobian_u(model, x_hat, u_hat, tau)
    r = s * eval_drift(model, x_hat, u_hat, tau) - A @ x_hat - B @ u_hat
    return ContinuousLinearization(A_tau=A, B_tau=B, r_tau=r)


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root by spectral decomposition.

    Eigenvalues in [-1e-8 * ||S||_2, 0) are clamped to zero; anything more
    negative raises, since the input is then not a covariance up to
    round-off.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("psd_sqrt expects a square matrix")
    nrm = np.linalg.norm(S, 2) if S.size else 0.0
    if np.linalg.norm(S - S.T) > 1e-10 * (1.0 + nrm):
        raise ValueError("psd_sqrt expects a symmetric matrix")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w.size and w.min() < -1e-8 * max(abs(w.max()), abs(w.min())):
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():g})")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def _diffusion_normalized(model: ModelSpec, sigma: float, tau: float) -> np.ndarray:
    # physical time of the normalized instant; t_0 = 0 convention
    return np.asarray(model.diffusion(sigma * tau), dtype=float)


def discretize_exact(model: ModelSpec, ref: ReferenceTrajectory, k: int,
                     substeps: int = 10) -> LinearizedStep:
    """Exact ZOH discretization of the linearized system over step k.

    Integrates the joint matrix ODE for the state transition matrix, the
    control and residual integrals, and the Lyapunov equation for the noise
    covariance with fixed-step RK4 (``substeps`` stages per interval).
    """
    N = ref.N
    if not 0 <= k < N:
        raise ValueError(f"step index {k} out of range [0, {N})")
    n_x, n_u = model.n_x, model.n_u
    tau0 = k / N
    h = (1.0 / N) / substeps

    Phi = np.eye(n_x)
    Bint = np.zeros((n_x, n_u))
    rint = np.zeros(n_x)
    Sig = np.zeros((n_x, n_x))

    def rhs(tau, Phi, Bint, rint, Sig):
        lin = linearize(model, ref, tau)
        G = _diffusion_normalized(model, ref.sigma, tau)
        GG = G @ G.T
        A = lin.A_tau
        return (A @ Phi,
                A @ Bint + lin.B_tau,
                A @ rint + lin.r_tau,
                A @ Sig + Sig @ A.T + GG)

    for j in range(substeps):
        tau = tau0 + j * h
        k1 = rhs(tau, Phi, Bint, rint, Sig)
        k2 = rhs(tau + 0.5 * h, Phi + 0.5 * h * k1[0], Bint + 0.5 * h * k1[1],
                 rint + 0.5 * h * k1[2], Sig + 0.5 * h * k1[3])
        k3 = rhs(tau + 0.5 * h, Phi + 0.5 * h * k2[0], Bint + 0.5 * h * k2[1],
                 rint + 0.5 * h * k2[2], Sig + 0.5 * h * k2[3])
        k4 = rhs(tau + h, Phi + h * k3[0], Bint + h * k3[1],
                 rint + h * k3[2], Sig + h * k3[3])
        Phi = Phi + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Bint = Bint + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        rint = rint + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        Sig = Sig + (h / 6.0) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])

    for name, arr in (("A", Phi), ("B", Bint), ("r", rint), ("Sigma", Sig)):
        if not np.all(np.isfinite(arr)):
            raise NumericalFailure(f"non-finite {name} matrix while discretizing step {k}")

    Sig = 0.5 * (Sig + Sig.T)
    return LinearizedStep(A_k=Phi, B_k=Bint, r_k=rint, G_k=psd_sqrt(Sig), Sigma_k=Sig)


def discretize_first_order(model: ModelSpec, ref: ReferenceTrajectory, k: int) -> LinearizedStep:
    """First-order (Euler) discretization over step k."""
    N = ref.N
    if not 0 <= k < N:
        raise ValueError(f"step index {k} out of range [0, {N})")
    dtau = 1.0 / N
    lin = linearize(model, ref, k / N)
    G = _diffusion_normalized(model, ref.sigma, k / N)
    n_x = model.n_x
    Gk = np.zeros((n_x, n_x))
    Gk[:, : G.shape[1]] = np.sqrt(dtau) * G
    return LinearizedStep(
        A_k=np.eye(n_x) + dtau * lin.A_tau,
        B_k=dtau * lin.B_tau,
        r_k=dtau * lin.r_tau,
        G_k=Gk,
        Sigma_k=dtau * (G @ G.T),
    )


def discretize_all(model: ModelSpec, ref: ReferenceTrajectory, scheme: str = "exact",
                   substeps: int = 10) -> list[LinearizedStep]:
    """Discretize every interval of the reference grid."""
    if scheme == "exact":
        return [discretize_exact(model, ref, k, substeps) for k in range(ref.N)]
    if scheme == "first_order":
        return [discretize_first_order(model, ref, k) for k in range(ref.N)]
    raise ValueError(f"unknown discretization scheme {scheme!r}")
