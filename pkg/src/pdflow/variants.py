"""Augmented-Lagrangian style dynamics written out directly, plus the
factories that embed them in the generalized filter framework.

Two closed forms are implemented without going through the filter engine,
so that matching trajectories from both code paths is a genuine
cross-check rather than a tautology:

* ``aug_lagrangian``: multiplier feedthrough on both dual channels,
      mu = zeta + (Ax - b),  lam = rho + max(0, g(x)),
      xdot = -(grad f + grad_g lam + A'mu),  zetadot = Ax - b,
      rhodot = projected g(x).
* ``lp_richert_cortes``: linear programs only,
      x = xi - theta - Phi'lam,  xidot = -theta - Phi'lam,
      lamdot = projected (Phi x - phi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import IntegratorConfig, SolverState
from .filters import FilterSpec
from .problems import ConvexProblem, DimensionMismatch

Array = np.ndarray

VARIANTS = ("aug_lagrangian", "lp_richert_cortes")

__all__ = [
    "VARIANTS",
    "DirectTrajectory",
    "aug_lagrangian_rhs",
    "richert_cortes_rhs",
    "as_generalized",
    "direct_state_dim",
    "direct_to_solver_state",
    "integrate_direct",
    "trajectory_divergence",
]


def aug_lagrangian_rhs(problem: ConvexProblem, state: Array):
    """Derivative and resolved (x, mu, lam) for the flat state [x, zeta, rho]."""
    n, r, m = problem.n, problem.r, problem.m
    state = np.asarray(state, dtype=float)
    if state.shape != (n + r + m,):
        raise DimensionMismatch(f"state has shape {state.shape}, expected ({n + r + m},)")
    x = state[:n]
    zeta = state[n : n + r]
    rho = state[n + r :]
    if rho.size and rho.min() < 0:
        raise ValueError("rho must be nonnegative")

    h = problem.eq_matrix @ x - problem.eq_vector if r else np.zeros(0)
    mu = zeta + h
    gx = problem.g(x)
    lam = rho + np.maximum(0.0, gx)

    acc = problem.grad_f(x)
    if m:
        acc = acc + problem.grad_g(x) @ lam
    if r:
        acc = acc + problem.eq_matrix.T @ mu

    der = np.empty_like(state)
    der[:n] = -acc
    der[n : n + r] = h
    der[n + r :] = np.where((rho <= 0.0) & (gx < 0.0), 0.0, gx)
    return der, (x.copy(), mu, lam)


def richert_cortes_rhs(lp: ConvexProblem, state: Array):
    """Derivative and resolved x for the flat state [xi, lam] of a linear program."""
    if lp.r != 0:
        raise DimensionMismatch("this dynamics handles inequality-only linear programs")
    n, m = lp.n, lp.m
    state = np.asarray(state, dtype=float)
    if state.shape != (n + m,):
        raise DimensionMismatch(f"state has shape {state.shape}, expected ({n + m},)")
    xi = state[:n]
    lam = state[n:]
    if lam.size and lam.min() < 0:
        raise ValueError("lam must be nonnegative")

    drive = lp.grad_f(xi)  # constant theta for a genuine linear program
    if m:
        drive = drive + lp.grad_g(xi) @ lam
    x = xi - drive
    gx = lp.g(x)

    der = np.empty_like(state)
    der[:n] = -drive
    der[n:] = np.where((lam <= 0.0) & (gx < 0.0), 0.0, gx)
    return der, x


def as_generalized(variant: str, problem: ConvexProblem):
    """Filter sections that reproduce a direct variant inside the engine."""
    if variant == "aug_lagrangian":
        m_specs = [FilterSpec.integrator("primal") for _ in range(problem.n)]
        h_specs = [FilterSpec.pi("dual_eq") for _ in range(problem.r)]
        g_specs = [FilterSpec.pi("dual_ineq") for _ in range(problem.m)]
        # no primal feedthrough: the engine resolves outputs in one pass
        assert all(s.feedthrough == 0.0 for s in m_specs)
        return m_specs, h_specs, g_specs
    if variant == "lp_richert_cortes":
        if problem.r != 0:
            raise DimensionMismatch("lp_richert_cortes requires a problem without equalities")
        m_specs = [FilterSpec.pi("primal") for _ in range(problem.n)]
        g_specs = [FilterSpec.integrator("dual_ineq") for _ in range(problem.m)]
        return m_specs, [], g_specs
    raise ValueError(f"unsupported variant {variant!r}; choose from {VARIANTS}")


def direct_state_dim(variant: str, problem: ConvexProblem) -> int:
    if variant == "aug_lagrangian":
        return problem.n + problem.r + problem.m
    if variant == "lp_richert_cortes":
        return problem.n + problem.m
    raise ValueError(f"unsupported variant {variant!r}; choose from {VARIANTS}")


def direct_to_solver_state(variant: str, problem: ConvexProblem, state: Array) -> SolverState:
    """Map a direct flat state onto the equivalent engine state blocks."""
    state = np.asarray(state, dtype=float)
    n, r, m = problem.n, problem.r, problem.m
    if variant == "aug_lagrangian":
        return SolverState(state[:n].copy(), state[n : n + r].copy(), state[n + r :].copy())
    if variant == "lp_richert_cortes":
        return SolverState(state[:n].copy(), np.zeros(0), state[n:].copy())
    raise ValueError(f"unsupported variant {variant!r}; choose from {VARIANTS}")


@dataclass
class DirectTrajectory:
    """Recorded direct-variant run with resolved signals per sample."""

    times: Array
    state: Array
    x: Array
    mu: Array
    lam: Array
    meta: dict


def integrate_direct(
    variant: str,
    problem: ConvexProblem,
    initial: Array,
    config: IntegratorConfig = IntegratorConfig(),
) -> DirectTrajectory:
    """Fixed-step run of a direct variant with the engine's clamping policy.

    The nonnegative tail of the state (rho or lam) is clamped after every
    step and at internal stages, mirroring :func:`pdflow.engine.integrate`.
    """
    dim = direct_state_dim(variant, problem)
    y = np.asarray(initial, dtype=float).copy()
    if y.shape != (dim,):
        raise DimensionMismatch(f"initial state has shape {y.shape}, expected ({dim},)")
    n, r, m = problem.n, problem.r, problem.m
    nonneg_from = dim - m
    if m and y[nonneg_from:].min() < 0:
        raise ValueError("initial multiplier state must be nonnegative")

    if variant == "aug_lagrangian":
        def f(state):
            der, (x, mu, lam) = aug_lagrangian_rhs(problem, state)
            return der, x, mu, lam
    elif variant == "lp_richert_cortes":
        def f(state):
            der, x = richert_cortes_rhs(problem, state)
            return der, x, np.zeros(0), state[n:].copy()
    else:
        raise ValueError(f"unsupported variant {variant!r}; choose from {VARIANTS}")

    hstep = config.step
    num_steps = max(1, int(round(config.horizon / hstep)))
    rec_every = config.record_every
    rk4 = config.method == "rk4"
    half = 0.5 * hstep
    sixth = hstep / 6.0

    def clamp(state):
        if m:
            np.maximum(state[nonneg_from:], 0.0, out=state[nonneg_from:])
        return state

    times, states, xs, mus, lams = [], [], [], [], []
    for k in range(num_steps + 1):
        der, x, mu, lam = f(y)
        if k % rec_every == 0 or k == num_steps:
            times.append(k * hstep)
            states.append(y.copy())
            xs.append(x)
            mus.append(mu)
            lams.append(lam)
        if k == num_steps:
            break
        if rk4:
            k1 = der
            k2 = f(clamp(y + half * k1))[0]
            k3 = f(clamp(y + half * k2))[0]
            k4 = f(clamp(y + hstep * k3))[0]
            y = clamp(y + sixth * (k1 + 2.0 * (k2 + k3) + k4))
        else:
            y = clamp(y + hstep * der)
        if not np.isfinite(y.sum()):
            raise RuntimeError(f"direct integration blew up at step {k + 1}")

    return DirectTrajectory(
        times=np.array(times),
        state=np.array(states),
        x=np.array(xs),
        mu=np.array(mus).reshape(len(times), r),
        lam=np.array(lams).reshape(len(times), m),
        meta={"variant": variant, "method": config.method, "step": hstep},
    )


_SIGNAL_ATTRS = {"x": "x", "mu": "mu", "lambda": "lam", "lam": "lam"}


def trajectory_divergence(traj_a, traj_b, signals=("x", "mu", "lambda")) -> float:
    """Sup-norm gap between two runs on the same time grid.

    Accepts any pair of trajectory objects exposing ``times`` plus the
    requested signal arrays (engine and direct trajectories both qualify).
    """
    if traj_a.times.shape != traj_b.times.shape or not np.array_equal(traj_a.times, traj_b.times):
        raise ValueError("time grids differ; rerun both on identical grids")
    gap = 0.0
    for name in signals:
        attr = _SIGNAL_ATTRS.get(name)
        if attr is None:
            raise ValueError(f"unknown signal {name!r}; choose from x, mu, lambda")
        a = getattr(traj_a, attr)
        b = getattr(traj_b, attr)
        if a.shape != b.shape:
            raise ValueError(f"signal {name!r} has mismatched shapes {a.shape} vs {b.shape}")
        if a.size:
            gap = max(gap, float(np.max(np.abs(a - b))))
    return gap
