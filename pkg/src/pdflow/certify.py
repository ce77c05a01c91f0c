"""Storage functions, passivity audits, and convergence detection.

Each filter bank carries a quadratic storage: the integrator state of a
channel is penalized around the reference value of its output signal, every
other state around zero, each term weighted by 1/(2c) with c the residue.
The three bank storages S (primal), W (equality dual), U (inequality dual)
sum to a Lyapunov function V that must not increase along noise-free runs,
and each bank individually must respect its supply rate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import DynamicsSystem, SolverState, Trajectory
from .problems import ConvexProblem, KktPoint, KktResidual, kkt_residual

Array = np.ndarray

__all__ = [
    "ReferencePoint",
    "StorageBreakdown",
    "StorageSeries",
    "AuditReport",
    "ConvergenceReport",
    "storage_values",
    "attach_storage",
    "passivity_audit",
    "lyapunov_monotone",
    "convergence_report",
]

REFERENCE_RESIDUAL_TOL = 1e-9


class ReferencePoint:
    """A validated KKT point used as the origin for deviation coordinates.

    Construction checks nonnegativity of the inequality multiplier and a
    KKT residual below 1e-9.  The audit helpers evaluate the deviation
    signals around it: x~ = x - x*, psi~ = A'mu - A'mu*,
    eta~ = grad_g(x) lam - grad_g(x*) lam*, and u~ = -eta - psi - grad_f(x*).
    """

    def __init__(self, problem: ConvexProblem, point: KktPoint):
        residual = kkt_residual(problem, point)
        if residual.total > REFERENCE_RESIDUAL_TOL:
            raise ValueError(
                f"reference point rejected: KKT residual {residual.total:.3e} "
                f"exceeds {REFERENCE_RESIDUAL_TOL:g}"
            )
        if point.lam.size and point.lam.min() < 0:
            raise ValueError("reference point rejected: negative inequality multiplier")
        self.problem = problem
        self.point = point
        self.x = point.x
        self.mu = point.mu
        self.lam = point.lam
        self.residual = residual
        self.grad_f_star = problem.grad_f(point.x)
        self.psi_star = problem.eq_matrix.T @ point.mu if problem.r else np.zeros(problem.n)
        self.eta_star = problem.grad_g(point.x) @ point.lam if problem.m else np.zeros(problem.n)

    @classmethod
    def from_builtin(cls, name: str) -> "ReferencePoint":
        from .problems import builtin_problem, builtin_reference

        return cls(builtin_problem(name), builtin_reference(name))


@dataclass(frozen=True)
class StorageBreakdown:
    """Storage split by bank and by channel; ``V = S + W + U``."""

    S: float
    W: float
    U: float
    s_blocks: Array
    w_blocks: Array
    u_blocks: Array

    @property
    def V(self) -> float:
        return self.S + self.W + self.U


@dataclass(frozen=True)
class StorageSeries:
    """Storage evaluated along a recorded trajectory."""

    S: Array
    W: Array
    U: Array

    @property
    def V(self) -> Array:
        return self.S + self.W + self.U


def storage_values(system: DynamicsSystem, state: SolverState, ref: ReferencePoint) -> StorageBreakdown:
    """Evaluate the three bank storages at a single state."""
    s_blocks = system.m_bank.storage_blocks(state.xi, ref.x)
    w_blocks = system.h_bank.storage_blocks(state.zeta, ref.mu)
    u_blocks = system.g_bank.storage_blocks(state.rho, ref.lam)
    return StorageBreakdown(
        S=float(s_blocks.sum()),
        W=float(w_blocks.sum()),
        U=float(u_blocks.sum()),
        s_blocks=s_blocks,
        w_blocks=w_blocks,
        u_blocks=u_blocks,
    )


def attach_storage(trajectory: Trajectory, system: DynamicsSystem, ref: ReferencePoint) -> Trajectory:
    """Compute the storage series for every recorded sample and attach it."""
    series = StorageSeries(
        S=system.m_bank.storage_series(trajectory.xi, ref.x).sum(axis=1),
        W=system.h_bank.storage_series(trajectory.zeta, ref.mu).sum(axis=1),
        U=system.g_bank.storage_series(trajectory.rho, ref.lam).sum(axis=1),
    )
    trajectory.storage = series
    return trajectory


@dataclass(frozen=True)
class AuditReport:
    """Worst supply-rate margins per bank (positive means violation)."""

    primal: float
    dual_eq: float
    dual_ineq: float
    tol: float

    @property
    def ok(self) -> bool:
        return max(self.primal, self.dual_eq, self.dual_ineq) <= self.tol

    def as_dict(self) -> dict:
        return {
            "primal_margin": self.primal,
            "dual_eq_margin": self.dual_eq,
            "dual_ineq_margin": self.dual_ineq,
            "tol": self.tol,
            "ok": self.ok,
        }


def _supply_rates(trajectory: Trajectory, ref: ReferencePoint):
    problem = ref.problem
    x_dev = trajectory.x - ref.x
    T = trajectory.x.shape[0]

    if problem.r:
        psi = trajectory.mu @ problem.eq_matrix
    else:
        psi = np.zeros((T, problem.n))
    if problem.m:
        eta = np.empty((T, problem.n))
        for i in range(T):
            eta[i] = problem.grad_g(trajectory.x[i]) @ trajectory.lam[i]
    else:
        eta = np.zeros((T, problem.n))

    u_dev = -eta - psi - ref.grad_f_star
    psi_dev = psi - ref.psi_star
    eta_dev = eta - ref.eta_star
    return (
        np.einsum("ij,ij->i", x_dev, u_dev),
        np.einsum("ij,ij->i", x_dev, psi_dev),
        np.einsum("ij,ij->i", x_dev, eta_dev),
    )


def passivity_audit(trajectory: Trajectory, ref: ReferencePoint) -> AuditReport:
    """Check each bank's storage growth against its supply rate.

    For consecutive samples the storage derivative is approximated by the
    forward difference and compared with the trapezoidal average of the
    supply rate; the worst (most positive) margin per bank is returned.
    Requires :func:`attach_storage` to have run on the trajectory.
    """
    if trajectory.storage is None:
        raise ValueError("trajectory has no storage series; call attach_storage first")
    if len(trajectory) < 2:
        raise ValueError("trajectory too short to audit (need at least 2 samples)")

    sup_p, sup_e, sup_i = _supply_rates(trajectory, ref)
    dt = np.diff(trajectory.times)

    def worst(series: Array, supply: Array) -> float:
        rate = np.diff(series) / dt
        mid = 0.5 * (supply[:-1] + supply[1:])
        return float(np.max(rate - mid))

    storage = trajectory.storage
    return AuditReport(
        primal=worst(storage.S, sup_p),
        dual_eq=worst(storage.W, sup_e),
        dual_ineq=worst(storage.U, sup_i),
        tol=10.0 * trajectory.meta.get("step", float(dt.min())),
    )


def lyapunov_monotone(trajectory: Trajectory) -> float:
    """Largest increase of V between consecutive samples (0 for monotone decay).

    Values above ``10 * step * (1 + max V)`` indicate a genuine violation
    rather than discretization noise.
    """
    if trajectory.storage is None:
        raise ValueError("trajectory has no storage series; call attach_storage first")
    if len(trajectory) < 2:
        raise ValueError("trajectory too short (need at least 2 samples)")
    return float(np.max(np.diff(trajectory.storage.V)))


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    settle_time: Optional[float]
    final_residual: KktResidual

    def as_dict(self) -> dict:
        return {
            "converged": self.converged,
            "settle_time": self.settle_time,
            "final_residual": self.final_residual.as_dict(),
        }


def convergence_report(trajectory: Trajectory, problem: ConvexProblem, tol: float) -> ConvergenceReport:
    """Detect sustained KKT residual decay along a trajectory.

    The settle time is the first sample time after which the residual total
    stays at or below ``tol`` through the end of the horizon; oscillatory
    re-crossings push it later.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    totals = np.empty(len(trajectory))
    last = None
    for i in range(len(trajectory)):
        last = kkt_residual(
            problem, KktPoint(trajectory.x[i], trajectory.mu[i], trajectory.lam[i])
        )
        totals[i] = last.total

    ok = totals <= tol
    if not ok[-1]:
        return ConvergenceReport(False, None, last)
    bad = np.nonzero(~ok)[0]
    settle_idx = int(bad[-1]) + 1 if bad.size else 0
    return ConvergenceReport(True, float(trajectory.times[settle_idx]), last)
