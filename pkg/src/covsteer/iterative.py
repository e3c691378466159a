"""Outer successive-convexification loop for nonlinear covariance steering.

Each iteration propagates the nonlinear mean under the current feedforward,
linearizes and discretizes about that reference, solves the convex
covariance-steering subproblem, and stops once the feedforward change drops
below tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import conic
from .blocks import assemble
from .conic import SolverSettings
from .discretization import ReferenceTrajectory, discretize_all
from .dynamics import ModelSpec, drift as eval_drift
from .subproblem import (CSProblemSpec, Policy, build_chance_constraints,
                         build_cost, build_terminal_mean, build_trust_region,
                         lower, relaxation_scale_needed)


class DivergenceError(RuntimeError):
    """Mean propagation produced non-finite states."""


class SubproblemError(RuntimeError):
    """Convex subproblem failed; carries the iteration record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class SteeringSettings:
    """Iteration control for the outer loop.

    Problem shaping (trust region, relaxation, terminal mode) lives on the
    problem spec; these are the algorithmic knobs.
    """

    max_iterations: int = 15
    tol: float = 1e-3
    mean_propagation: str = "deterministic"  # or "monte_carlo"
    mc_trials: int = 256
    mc_seed: int = 0
    discretization: str = "exact"            # or "first_order"
    substeps: int = 10
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.mean_propagation not in ("deterministic", "monte_carlo"):
            raise ValueError(f"unknown mean propagation mode {self.mean_propagation!r}")
        if self.discretization not in ("exact", "first_order"):
            raise ValueError(f"unknown discretization mode {self.discretization!r}")


@dataclass(frozen=True)
class IterationRecord:
    index: int
    x_ref: np.ndarray
    u_ref: np.ndarray
    policy: Optional[Policy]
    objective: float
    terminal_mean_error: float
    control_change: float
    solver_status: str
    solver_residuals: tuple
    solver_iterations: int
    chance_scale: float
    terminal_mode: str
    converged: bool


@dataclass(frozen=True)
class SteeringResult:
    policy: Policy
    history: tuple
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.history)


def propagate_mean(model: ModelSpec, u_bar, sigma: float, x0_mean,
                   mode: str = "deterministic", substeps: int = 10,
                   gains=None, steps=None, P_x0=None, trials: int = 256,
                   seed: int = 0) -> np.ndarray:
    """Mean state trajectory on the grid under a ZOH control sequence.

    Deterministic mode integrates dx/dtau = sigma f(x, u, tau) with RK4;
    Monte Carlo mode averages closed-loop noisy rollouts (requires P_x0, and
    feedback enters through ``gains`` with the innovation recursion built
    from ``steps``).
    """
    u_bar = np.atleast_2d(np.asarray(u_bar, dtype=float))
    N = u_bar.shape[0]
    x0_mean = np.asarray(x0_mean, dtype=float).ravel()

    if mode == "monte_carlo":
        from .montecarlo import SimOptions, simulate_closed_loop
        if P_x0 is None:
            raise ValueError("monte_carlo mean propagation needs P_x0")
        K_blocks = np.zeros((N, model.n_u, model.n_x)) if gains is None \
            else np.asarray(gains, dtype=float)
        if steps is None:
            # provisional linearization about a deterministic pre-pass
            x_det = propagate_mean(model, u_bar, sigma, x0_mean, "deterministic",
                                   substeps)
            ref = ReferenceTrajectory(x_det, u_bar, sigma)
            steps = discretize_all(model, ref, "first_order")
        policy = Policy(V=u_bar.ravel(), K_blocks=K_blocks)
        opts = SimOptions(trials=trials, substeps=substeps, seed=seed)
        result = simulate_closed_loop(model, policy, steps, x0_mean, P_x0,
                                      sigma, opts)
        return result.means
    if mode != "deterministic":
        raise ValueError(f"unknown mean propagation mode {mode!r}")

    h = (1.0 / N) / substeps
    out = np.empty((N + 1, model.n_x))
    out[0] = x0_mean
    x = x0_mean.copy()
    for k in range(N):
        u = u_bar[k]
        for j in range(substeps):
            tau = (k + j / substeps) / N

            def f(xv, tv):
                return sigma * eval_drift(model, xv, u, tv)

            k1 = f(x, tau)
            k2 = f(x + 0.5 * h * k1, tau + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, tau + 0.5 * h)
            k4 = f(x + h * k3, tau + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"mean propagation diverged during step {k}")
        out[k + 1] = x
    return out


def reshape_policy(V, K, n_x: int) -> Policy:
    """Split stacked solver output into per-step feedforward and gains.

    ``K`` is the full feedback matrix over states of dimension ``n_x``;
    entries outside the block-diagonal sparsity (including the trailing
    zero column block) must be zero.
    """
    V = np.asarray(V, dtype=float).ravel()
    K = np.asarray(K, dtype=float)
    m, L = K.shape
    if L % n_x != 0 or L // n_x < 2:
        raise ValueError("feedback matrix width must be (N+1) n_x")
    N = L // n_x - 1
    if m % N != 0:
        raise ValueError("feedback matrix height must be N n_u")
    n_u = m // N
    if V.shape != (N * n_u,):
        raise ValueError("inconsistent policy shapes")
    mask = np.ones_like(K, dtype=bool)
    blocks = np.empty((N, n_u, n_x))
    for k in range(N):
        rs, cs = slice(k * n_u, (k + 1) * n_u), slice(k * n_x, (k + 1) * n_x)
        blocks[k] = K[rs, cs]
        mask[rs, cs] = False
    if np.any(K[mask] != 0.0):
        raise ValueError("feedback matrix has entries outside the block-diagonal sparsity")
    return Policy(V=V, K_blocks=blocks)


def _resolve_terminal_mode(spec: CSProblemSpec, x_ref_N) -> str:
    if spec.terminal_mode in ("soft", "hard"):
        return spec.terminal_mode
    # auto: switch to the hard equality once the reference lands near the target
    if spec.trust_region is not None:
        err = np.max(np.abs(x_ref_N - spec.xf_mean))
        if err <= 0.5 * spec.trust_region.delta_x:
            return "hard"
    return "soft"


def ics_solve(model: ModelSpec, spec: CSProblemSpec, initial_guess,
              settings: SteeringSettings = SteeringSettings(),
              initial_gains=None) -> SteeringResult:
    """Run the full successive-convexification loop.

    ``initial_guess`` is the length-N ZOH control sequence seeding the first
    linearization; gains start at zero unless supplied.  Returns the final
    policy and the per-iteration history; ``converged`` is False when the
    change never fell below tolerance within the iteration budget.
    """
    u_hat = np.atleast_2d(np.asarray(initial_guess, dtype=float)).copy()
    N = u_hat.shape[0]
    if u_hat.shape[1] != model.n_u:
        raise ValueError("initial guess width must equal the control dimension")
    K_hat = np.zeros((N, model.n_u, model.n_x)) if initial_gains is None \
        else np.asarray(initial_gains, dtype=float).copy()
    sigma = spec.sigma
    if abs(spec.weights.scale - sigma / N) > 1e-9 * (1 + sigma / N):
        raise ValueError("cost weight scale is inconsistent with sigma / N")

    history = []
    warm = None
    prev_steps = None
    policy = None

    for i in range(1, settings.max_iterations + 1):
        x_hat = propagate_mean(model, u_hat, sigma, spec.x0_mean,
                               mode=settings.mean_propagation,
                               substeps=settings.substeps, gains=K_hat,
                               steps=prev_steps, P_x0=spec.P_x0,
                               trials=settings.mc_trials, seed=settings.mc_seed)
        ref = ReferenceTrajectory(x_hat, u_hat, sigma)
        steps = discretize_all(model, ref, settings.discretization, settings.substeps)
        blocks = assemble(steps, sigma, spec.P_x0)
        mode = _resolve_terminal_mode(spec, x_hat[-1])

        s_needed = relaxation_scale_needed(blocks, spec, x_hat, u_hat)
        relax = spec.relaxation
        scale = max(1.0, s_needed * relax.rho ** (i - 1)) if i <= relax.n_relax else 1.0

        def attempt(tr_factor, chance_scale):
            local_spec = spec
            if tr_factor != 1.0 and spec.trust_region is not None:
                tr = spec.trust_region
                local_spec = replace(spec, trust_region=replace(
                    tr, delta_x=tr.delta_x * tr_factor, delta_u=tr.delta_u * tr_factor))
            rows = build_chance_constraints(blocks, local_spec, chance_scale)
            rows += build_trust_region(blocks, local_spec, ref)
            objective = build_cost(blocks, local_spec)
            lowered = lower(blocks, local_spec, objective, rows, mode)
            ws = warm if warm is not None and warm[0].shape == lowered.program.c.shape \
                else None
            sol = conic.solve(lowered.program, settings.solver,
                              warm_start=ws)
            return lowered, sol

        lowered, sol = attempt(1.0, scale)
        if sol.status == "infeasible":
            # one-shot recovery: widen the trust region, restart the homotopy
            lowered, sol = attempt(2.0, max(1.0, s_needed))

        tmean = build_terminal_mean(blocks, spec, "soft")
        if sol.status not in ("optimal",):
            record = IterationRecord(
                index=i, x_ref=x_hat, u_ref=u_hat.copy(), policy=policy,
                objective=np.nan, terminal_mean_error=np.nan,
                control_change=np.nan, solver_status=sol.status,
                solver_residuals=sol.residuals, solver_iterations=sol.iterations,
                chance_scale=scale, terminal_mode=mode, converged=False)
            history.append(record)
            raise SubproblemError(
                f"subproblem {sol.status} at iteration {i}", record=record)

        V, K_blocks, eta = lowered.extract(sol.primal)
        policy = Policy(V=V, K_blocks=K_blocks)
        warm = (sol.primal, sol.dual, sol.slack)
        v_steps = V.reshape(N, model.n_u)
        change = float(np.max(np.linalg.norm(v_steps - u_hat, axis=1)))
        term_err = float(np.linalg.norm(tmean.residual(V)))
        converged = change <= settings.tol
        history.append(IterationRecord(
            index=i, x_ref=x_hat, u_ref=u_hat.copy(), policy=policy,
            objective=lowered.objective_value(sol.primal),
            terminal_mean_error=term_err, control_change=change,
            solver_status=sol.status, solver_residuals=sol.residuals,
            solver_iterations=sol.iterations, chance_scale=scale,
            terminal_mode=mode, converged=converged))
        if converged:
            return SteeringResult(policy=policy, history=tuple(history), converged=True)
        u_hat = v_steps.copy()
        K_hat = K_blocks
        prev_steps = steps

    return SteeringResult(policy=policy, history=tuple(history), converged=False)
