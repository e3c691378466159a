"""Closed-loop Monte Carlo validation of a steering policy.

Simulates the nonlinear SDE under u_k = v_k + K_k y_k with Euler-Maruyama
substepping and accumulates empirical statistics against the requested
boundary distributions and half-space constraints.  The controller state
y_k is reconstructed from state innovations: y_{k+1} = A_k y_k +
(x_{k+1} - m_{k+1}) with m_{k+1} the noise-free propagation of the same
drift substeps from x_k, which coincides with the defining recursion of the
y-process whenever the plant is exactly linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .discretization import LinearizedStep, psd_sqrt
from .dynamics import ModelSpec
from .subproblem import HalfSpace, Policy


class SimulationError(RuntimeError):
    """Too many divergent trials to report meaningful statistics."""


@dataclass(frozen=True)
class SimOptions:
    trials: int = 5000
    substeps: int = 10
    seed: int = 0
    record_full_paths: bool = False
    max_divergent_fraction: float = 0.01

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("need at least one trial")
        if self.substeps < 1:
            raise ValueError("need at least one substep")


@dataclass(frozen=True)
class Ellipse:
    center: np.ndarray
    semi_axes: np.ndarray  # (major, minor)
    angle: float           # radians, major axis vs first coordinate


@dataclass(frozen=True)
class SimulationResult:
    """Empirical statistics of one closed-loop Monte Carlo run."""

    means: np.ndarray          # (N+1, n_x)
    covariances: np.ndarray    # (N+1, n_x, n_x)
    states: np.ndarray         # (trials, N+1, n_x), grid samples
    controls: np.ndarray       # (trials, N, n_u)
    terminal_mean: np.ndarray
    terminal_cov: np.ndarray
    divergent: int
    trials: int
    seed: int
    paths: Optional[np.ndarray] = None       # (trials, N*substeps+1, n_x)
    valid_mask: Optional[np.ndarray] = None  # (trials,)


def simulate_closed_loop(model: ModelSpec, policy: Policy,
                         steps: Sequence[LinearizedStep], x0_mean, P_x0,
                         sigma: float, opts: SimOptions = SimOptions()) -> SimulationResult:
    """Simulate the nonlinear SDE under the feedforward-plus-feedback policy.

    Per trial: draw x0 from N(x0_mean, P_x0), set y0 = x0 - x0_mean, apply
    u_k = v_k + K_k y_k over each interval, integrate by Euler-Maruyama in
    normalized time with diffusion sqrt(sigma) G, and update y through the
    innovation recursion.  Each trial consumes its own RNG stream derived
    from (seed, trial index).
    """
    steps = list(steps)
    N = len(steps)
    if policy.N != N:
        raise ValueError(f"policy has {policy.N} steps, discretization has {N}")
    if policy.n_u != model.n_u or policy.n_x != model.n_x:
        raise ValueError("policy dimensions do not match the model")
    n_x, n_u, n_w = model.n_x, model.n_u, model.n_w
    T = opts.trials
    S = opts.substeps
    x0_mean = np.asarray(x0_mean, dtype=float).ravel()
    L0 = psd_sqrt(np.asarray(P_x0, dtype=float))

    # per-trial streams: first the initial state, then the path noise
    children = np.random.SeedSequence(opts.seed).spawn(T)
    z0 = np.empty((T, n_x))
    noise = np.empty((T, N, S, n_w))
    for t, child in enumerate(children):
        rng = np.random.default_rng(child)
        z0[t] = rng.standard_normal(n_x)
        noise[t] = rng.standard_normal((N, S, n_w))

    x = x0_mean + z0 @ L0.T
    y = x - x0_mean
    h = (1.0 / N) / S
    sqrt_h = math.sqrt(h)
    sqrt_sigma = math.sqrt(sigma)

    states = np.empty((T, N + 1, n_x))
    controls = np.empty((T, N, n_u))
    states[:, 0] = x
    paths = np.empty((T, N * S + 1, n_x)) if opts.record_full_paths else None
    if paths is not None:
        paths[:, 0] = x

    for k in range(N):
        vk = policy.feedforward(k)
        Kk = policy.gain(k)
        u = vk + y @ Kk.T
        controls[:, k] = u
        xm = x.copy()
        for j in range(S):
            tau = (k + j / S) / N
            t_phys = sigma * tau
            G = np.asarray(model.diffusion(t_phys), dtype=float)
            f_x = model.drift_batch(x, u, t_phys)
            f_m = model.drift_batch(xm, u, t_phys)
            dw = noise[:, k, j] * sqrt_h
            x = x + sigma * h * f_x + sqrt_sigma * (dw @ G.T)
            xm = xm + sigma * h * f_m
            if paths is not None:
                paths[:, k * S + j + 1] = x
        innovation = x - xm
        y = y @ steps[k].A_k.T + innovation
        states[:, k + 1] = x

    valid = np.all(np.isfinite(states.reshape(T, -1)), axis=1) & \
        np.all(np.isfinite(controls.reshape(T, -1)), axis=1)
    divergent = int(T - valid.sum())
    if divergent > opts.max_divergent_fraction * T:
        raise SimulationError(
            f"{divergent} of {T} trials diverged (limit "
            f"{opts.max_divergent_fraction:.0%})")

    good = states[valid]
    means = good.mean(axis=0)
    centered = good - means[None, :, :]
    denom = max(good.shape[0] - 1, 1)
    covariances = np.einsum("tki,tkj->kij", centered, centered) / denom
    return SimulationResult(
        means=means, covariances=covariances, states=states, controls=controls,
        terminal_mean=means[-1].copy(), terminal_cov=covariances[-1].copy(),
        divergent=divergent, trials=T, seed=opts.seed, paths=paths,
        valid_mask=valid)


def violation_rate(result: SimulationResult, half_space: HalfSpace, k: int) -> float:
    """Fraction of valid trials with normal^T z_k > offset.

    State half-spaces (normal of length n_x) are checked against the grid
    states; control half-spaces against the applied controls.
    """
    valid = result.valid_mask if result.valid_mask is not None \
        else np.ones(result.trials, dtype=bool)
    n_x = result.states.shape[2]
    if half_space.normal.shape == (n_x,):
        if not 0 <= k < result.states.shape[1]:
            raise IndexError(f"no state statistics at step {k}")
        vals = result.states[valid, k] @ half_space.normal
    elif half_space.normal.shape == (result.controls.shape[2],):
        if not 0 <= k < result.controls.shape[1]:
            raise IndexError(f"no control statistics at step {k}")
        vals = result.controls[valid, k] @ half_space.normal
    else:
        raise ValueError("half-space dimension matches neither state nor control")
    return float(np.mean(vals > half_space.offset))


def violation_table(result: SimulationResult, constraints, family: str = "state") -> np.ndarray:
    """Per-step violation rates, one row per half-space."""
    n_steps = result.states.shape[1] if family == "state" else result.controls.shape[1]
    per_step = constraints if constraints and not isinstance(constraints[0], HalfSpace) \
        else [constraints] * n_steps
    max_m = max((len(c) for c in per_step), default=0)
    table = np.full((max_m, n_steps), np.nan)
    for k, hs_list in enumerate(per_step[:n_steps]):
        for m, hs in enumerate(hs_list):
            table[m, k] = violation_rate(result, hs, k)
    return table


def confidence_ellipse(mean, cov, level: float = 0.9) -> Ellipse:
    """Axis-aligned description of the given-level Gaussian ellipse in 2-D.

    Semi-axes are sqrt(q * eigenvalue) with q the chi-square quantile with
    two degrees of freedom, q = -2 ln(1 - level).
    """
    mean = np.asarray(mean, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    if mean.shape != (2,) or cov.shape != (2, 2):
        raise ValueError("confidence_ellipse expects a 2-D mean and covariance")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    q = -2.0 * math.log(1.0 - level)
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.clip(w, 0.0, None)
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order]
    angle = math.atan2(V[1, 0], V[0, 0])
    return Ellipse(center=mean, semi_axes=np.sqrt(q * w), angle=angle)
