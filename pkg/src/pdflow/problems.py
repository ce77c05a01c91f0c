"""Convex programs with first-order oracles, KKT residuals, and bundled instances.

A problem is

    minimize    f(x)
    subject to  g(x) <= 0,  A x - b = 0,

given through gradient oracles.  Degenerate blocks (no inequalities, no
equalities) are first class: the corresponding residual components and dual
variables are simply empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray

__all__ = [
    "DimensionMismatch",
    "OracleValueError",
    "ConvexProblem",
    "KktPoint",
    "KktResidual",
    "kkt_residual",
    "monotone_gradient_check",
    "make_lp",
    "make_quadratic",
    "make_toy",
    "distributed_lift",
    "builtin_problem",
    "builtin_reference",
    "BUILTIN_NAMES",
]


class DimensionMismatch(ValueError):
    """Operand shapes disagree with the problem's declared dimensions."""


class OracleValueError(ValueError):
    """A user oracle produced NaN or infinity."""


def _vec(a, length=None, name="vector") -> Array:
    out = np.atleast_1d(np.asarray(a, dtype=float))
    if out.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {out.shape}")
    if length is not None and out.shape[0] != length:
        raise DimensionMismatch(f"{name} has length {out.shape[0]}, expected {length}")
    return out


def _finite(a: Array, what: str) -> Array:
    if not np.all(np.isfinite(a)):
        raise OracleValueError(f"{what} returned a non-finite value")
    return a


def _inf_norm(a: Array) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


@dataclass(frozen=True)
class ConvexProblem:
    """Convex program data with analytic gradient oracles.

    Parameters
    ----------
    n : int
        Decision dimension.
    cost, grad : callables
        f and its gradient, both taking an ``(n,)`` array.
    ineq, ineq_grad : callables or None
        g mapping to ``(m,)`` and the matrix of constraint gradients
        stacked as columns, shape ``(n, m)``.  ``None`` when ``m == 0``.
    m : int
        Number of inequality constraints.
    eq_matrix, eq_vector
        Equality data ``A`` (r x n) and ``b`` (r,).

    Oracle outputs are checked for shape and finiteness on every call made
    through :meth:`f`, :meth:`grad_f`, :meth:`g` and :meth:`grad_g`.
    Instances are immutable and safe to share across concurrent runs as
    long as the supplied closures are re-entrant.
    """

    n: int
    cost: Callable[[Array], float]
    grad: Callable[[Array], Array]
    ineq: Optional[Callable[[Array], Array]]
    ineq_grad: Optional[Callable[[Array], Array]]
    m: int
    eq_matrix: Array
    eq_vector: Array

    def __post_init__(self):
        if self.n < 1:
            raise DimensionMismatch("decision dimension must be at least 1")
        A = np.asarray(self.eq_matrix, dtype=float).reshape(-1, self.n)
        b = _vec(self.eq_vector, None, "eq_vector") if np.size(self.eq_vector) else np.zeros(0)
        if A.shape[0] != b.shape[0]:
            raise DimensionMismatch(
                f"eq_matrix has {A.shape[0]} rows but eq_vector has length {b.shape[0]}"
            )
        object.__setattr__(self, "eq_matrix", A)
        object.__setattr__(self, "eq_vector", b)
        if self.m < 0 or (self.m > 0 and (self.ineq is None or self.ineq_grad is None)):
            raise DimensionMismatch("m > 0 requires ineq and ineq_grad oracles")

    @property
    def r(self) -> int:
        return self.eq_matrix.shape[0]

    def f(self, x) -> float:
        val = float(self.cost(_vec(x, self.n, "x")))
        if not np.isfinite(val):
            raise OracleValueError("cost returned a non-finite value")
        return val

    def grad_f(self, x) -> Array:
        out = _vec(self.grad(_vec(x, self.n, "x")), self.n, "grad f output")
        return _finite(out, "grad f")

    def g(self, x) -> Array:
        if self.m == 0:
            return np.zeros(0)
        out = _vec(self.ineq(_vec(x, self.n, "x")), self.m, "g output")
        return _finite(out, "g")

    def grad_g(self, x) -> Array:
        if self.m == 0:
            return np.zeros((self.n, 0))
        out = np.asarray(self.ineq_grad(_vec(x, self.n, "x")), dtype=float)
        if out.shape != (self.n, self.m):
            raise DimensionMismatch(
                f"grad g output has shape {out.shape}, expected {(self.n, self.m)}"
            )
        return _finite(out, "grad g")


@dataclass(frozen=True)
class KktPoint:
    """Candidate primal-dual triple (x, mu, lambda)."""

    x: Array
    mu: Array
    lam: Array

    def __post_init__(self):
        object.__setattr__(self, "x", _vec(self.x, None, "x") if np.size(self.x) else np.atleast_1d(np.asarray(self.x, float)))
        object.__setattr__(self, "mu", _vec(self.mu, None, "mu") if np.size(self.mu) else np.zeros(0))
        object.__setattr__(self, "lam", _vec(self.lam, None, "lam") if np.size(self.lam) else np.zeros(0))


@dataclass(frozen=True)
class KktResidual:
    """Infinity-norm residuals of the four KKT conditions plus complementarity.

    ``total`` is the plain sum of the five components; it vanishes exactly
    at KKT points (up to floating-point evaluation of the oracles).
    """

    stationarity: float
    eq_violation: float
    ineq_violation: float
    dual_violation: float
    complementarity: float

    @property
    def total(self) -> float:
        return (
            self.stationarity
            + self.eq_violation
            + self.ineq_violation
            + self.dual_violation
            + self.complementarity
        )

    def as_dict(self) -> dict:
        return {
            "stationarity": self.stationarity,
            "eq_violation": self.eq_violation,
            "ineq_violation": self.ineq_violation,
            "dual_violation": self.dual_violation,
            "complementarity": self.complementarity,
            "total": self.total,
        }


def kkt_residual(problem: ConvexProblem, point: KktPoint) -> KktResidual:
    """Evaluate the five KKT residual components at a candidate point."""
    x = _vec(point.x, problem.n, "x")
    mu = _vec(point.mu, problem.r, "mu") if problem.r else np.zeros(0)
    lam = _vec(point.lam, problem.m, "lam") if problem.m else np.zeros(0)

    grad_term = problem.grad_f(x).copy()
    gx = problem.g(x)
    if problem.m:
        grad_term += problem.grad_g(x) @ lam
    if problem.r:
        grad_term += problem.eq_matrix.T @ mu

    return KktResidual(
        stationarity=_inf_norm(grad_term),
        eq_violation=_inf_norm(problem.eq_matrix @ x - problem.eq_vector) if problem.r else 0.0,
        ineq_violation=_inf_norm(np.maximum(0.0, gx)),
        dual_violation=_inf_norm(np.maximum(0.0, -lam)),
        complementarity=_inf_norm(lam * gx),
    )


def monotone_gradient_check(
    problem: ConvexProblem, sample_count: int, box, seed: int
) -> float:
    """Sampled monotonicity smoke test for the cost and constraint gradients.

    Draws ``sample_count`` pairs (x, y) uniformly from ``box = (lo, hi)``
    and returns the smallest inner product ``(grad(x) - grad(y)) . (x - y)``
    seen over the cost gradient and every constraint component gradient.
    A return value below about ``-1e-9`` flags a non-convex oracle; this is
    a smoke check, never a proof of convexity.
    """
    lo = _vec(box[0], problem.n, "box lower corner")
    hi = _vec(box[1], problem.n, "box upper corner")
    if not np.all(hi > lo):
        raise ValueError("box is degenerate: upper corner must exceed lower corner")
    if sample_count < 1:
        raise ValueError("sample_count must be positive")

    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(sample_count):
        x = rng.uniform(lo, hi)
        y = rng.uniform(lo, hi)
        d = x - y
        worst = min(worst, float((problem.grad_f(x) - problem.grad_f(y)) @ d))
        if problem.m:
            per_constraint = d @ (problem.grad_g(x) - problem.grad_g(y))
            worst = min(worst, float(per_constraint.min()))
    return worst


def make_lp(Phi, phi, theta) -> ConvexProblem:
    """Linear program  min theta.x  s.t. Phi x - phi <= 0  (no equalities)."""
    theta = _vec(theta, None, "theta")
    n = theta.shape[0]
    Phi = np.asarray(Phi, dtype=float).reshape(-1, n) if np.size(Phi) else np.zeros((0, n))
    if np.size(Phi) and np.asarray(Phi).ndim == 2 and np.asarray(Phi).shape[1] != n:
        raise DimensionMismatch(f"Phi has {np.asarray(Phi).shape[1]} columns, expected {n}")
    m = Phi.shape[0]
    phi = _vec(phi, m, "phi") if m else np.zeros(0)
    PhiT = Phi.T.copy()

    return ConvexProblem(
        n=n,
        cost=lambda x: float(theta @ x),
        grad=lambda x: theta,
        ineq=(lambda x: Phi @ x - phi) if m else None,
        ineq_grad=(lambda x: PhiT) if m else None,
        m=m,
        eq_matrix=np.zeros((0, n)),
        eq_vector=np.zeros(0),
    )


def make_quadratic(theta, Q=None, Phi=None, phi=None, A=None, b=None) -> ConvexProblem:
    """Convex quadratic cost theta.x + x.Q.x/2 with optional linear constraints.

    Q must be symmetric positive semidefinite (eigenvalues >= -1e-9).
    """
    theta = _vec(theta, None, "theta")
    n = theta.shape[0]
    if Q is None:
        Qm = None
    else:
        Qm = np.asarray(Q, dtype=float)
        if Qm.shape != (n, n):
            raise DimensionMismatch(f"Q has shape {Qm.shape}, expected {(n, n)}")
        if _inf_norm(Qm - Qm.T) > 1e-9:
            raise ValueError("Q is not symmetric")
        if np.linalg.eigvalsh(Qm).min() < -1e-9:
            raise ValueError("Q has a negative eigenvalue; cost would be non-convex")

    Phi = np.asarray(Phi, dtype=float).reshape(-1, n) if Phi is not None and np.size(Phi) else np.zeros((0, n))
    m = Phi.shape[0]
    phi = _vec(phi, m, "phi") if m else np.zeros(0)
    PhiT = Phi.T.copy()
    A = np.asarray(A, dtype=float).reshape(-1, n) if A is not None and np.size(A) else np.zeros((0, n))
    b = _vec(b, A.shape[0], "b") if A.shape[0] else np.zeros(0)

    if Qm is None:
        cost = lambda x: float(theta @ x)
        grad = lambda x: theta
    else:
        cost = lambda x: float(theta @ x + 0.5 * x @ (Qm @ x))
        grad = lambda x: theta + Qm @ x

    return ConvexProblem(
        n=n,
        cost=cost,
        grad=grad,
        ineq=(lambda x: Phi @ x - phi) if m else None,
        ineq_grad=(lambda x: PhiT) if m else None,
        m=m,
        eq_matrix=A,
        eq_vector=b,
    )


def make_toy() -> ConvexProblem:
    """Scalar problem with zero cost and the single equality x = 0.

    The unique optimum is x* = 0, but the cost is only (non-strictly)
    convex, which makes this the canonical counterexample for plain
    integrator dynamics.
    """
    return ConvexProblem(
        n=1,
        cost=lambda x: 0.0,
        grad=lambda x: np.zeros(1),
        ineq=None,
        ineq_grad=None,
        m=0,
        eq_matrix=np.array([[1.0]]),
        eq_vector=np.zeros(1),
    )


def _laplacian_components(L: Array, tol: float) -> int:
    # connected components of the graph induced by nonzero off-diagonal entries
    N = L.shape[0]
    seen = [False] * N
    components = 0
    for root in range(N):
        if seen[root]:
            continue
        components += 1
        stack = [root]
        seen[root] = True
        while stack:
            i = stack.pop()
            for j in range(N):
                if j != i and not seen[j] and abs(L[i, j]) > tol:
                    seen[j] = True
                    stack.append(j)
    return components


def distributed_lift(agent_problems: Sequence[ConvexProblem], laplacian) -> ConvexProblem:
    """Stack per-agent problems into one consensus-constrained program.

    Each agent owns a problem over the same R^n.  The lifted program runs
    over R^(nN) with cost ``sum_i f_i(x_i) + x.(L (x) I_n).x / 2``,
    block-diagonal per-agent constraints, and the consensus equalities
    ``(L (x) I_n) x = 0`` appended after the agents' own equality rows.
    """
    agents = list(agent_problems)
    if not agents:
        raise ValueError("need at least one agent problem")
    n = agents[0].n
    if any(a.n != n for a in agents):
        raise DimensionMismatch("all agent problems must share the same decision dimension")
    N = len(agents)

    L = np.asarray(laplacian, dtype=float)
    if L.shape != (N, N):
        raise DimensionMismatch(f"laplacian has shape {L.shape}, expected {(N, N)}")
    if _inf_norm(L - L.T) > 1e-9:
        raise ValueError("laplacian is not symmetric")
    if _inf_norm(L @ np.ones(N)) > 1e-9:
        raise ValueError("laplacian rows do not sum to zero")
    eigs = np.linalg.eigvalsh(L)
    if eigs.min() < -1e-9:
        raise ValueError(f"laplacian has a negative eigenvalue ({eigs.min():.3e})")
    scale = max(1.0, float(abs(eigs).max()))
    zero_eigs = int(np.sum(np.abs(eigs) <= 1e-8 * scale))
    components = _laplacian_components(L, 1e-12)
    if zero_eigs != components:
        raise ValueError(
            f"laplacian has {zero_eigs} zero eigenvalue(s) but the graph has "
            f"{components} connected component(s)"
        )

    kron = np.kron(L, np.eye(n))
    nL = n * N
    ms = [a.m for a in agents]
    m_total = int(sum(ms))

    def cost(x):
        total = 0.5 * float(x @ (kron @ x))
        for i, a in enumerate(agents):
            total += a.f(x[i * n : (i + 1) * n])
        return total

    def grad(x):
        out = kron @ x
        for i, a in enumerate(agents):
            out[i * n : (i + 1) * n] += a.grad_f(x[i * n : (i + 1) * n])
        return out

    def ineq(x):
        out = np.empty(m_total)
        pos = 0
        for i, a in enumerate(agents):
            if a.m:
                out[pos : pos + a.m] = a.g(x[i * n : (i + 1) * n])
                pos += a.m
        return out

    def ineq_grad(x):
        out = np.zeros((nL, m_total))
        pos = 0
        for i, a in enumerate(agents):
            if a.m:
                out[i * n : (i + 1) * n, pos : pos + a.m] = a.grad_g(x[i * n : (i + 1) * n])
                pos += a.m
        return out

    r_agents = int(sum(a.r for a in agents))
    A = np.zeros((r_agents + nL, nL))
    b = np.zeros(r_agents + nL)
    row = 0
    for i, a in enumerate(agents):
        if a.r:
            A[row : row + a.r, i * n : (i + 1) * n] = a.eq_matrix
            b[row : row + a.r] = a.eq_vector
            row += a.r
    A[row:, :] = kron

    return ConvexProblem(
        n=nL,
        cost=cost,
        grad=grad,
        ineq=ineq if m_total else None,
        ineq_grad=ineq_grad if m_total else None,
        m=m_total,
        eq_matrix=A,
        eq_vector=b,
    )


# ---------------------------------------------------------------------------
# bundled instances

LP_PHI = np.array([[-1.0, 0.0], [0.0, -1.0], [4.0, 3.0], [1.0, 2.0]])
LP_PHI_RHS = np.array([0.0, 0.0, 10.0, 5.0])
LP_THETA = np.array([-2.0, -3.0])

DEMO_THETA = (1.0, -2.0, 1.0)
DEMO_LAPLACIAN = np.array([[2.0, -1.0, -1.0], [-1.0, 2.0, -1.0], [-1.0, -1.0, 2.0]])

BUILTIN_NAMES = ("toy", "lp_example", "lp_strict", "distributed_demo")


def _demo_agents():
    agents = []
    for th in DEMO_THETA:
        agents.append(
            ConvexProblem(
                n=1,
                cost=(lambda th: lambda x: float(th * x[0]))(th),
                grad=(lambda th: lambda x: np.array([th]))(th),
                ineq=lambda x: np.array([x[0] - 1.0]),
                ineq_grad=lambda x: np.array([[1.0]]),
                m=1,
                eq_matrix=np.zeros((0, 1)),
                eq_vector=np.zeros(0),
            )
        )
    return agents


def builtin_problem(name: str) -> ConvexProblem:
    """Construct one of the bundled problems by name."""
    if name == "toy":
        return make_toy()
    if name == "lp_example":
        return make_lp(LP_PHI, LP_PHI_RHS, LP_THETA)
    if name == "lp_strict":
        return make_quadratic(LP_THETA, Q=np.eye(2), Phi=LP_PHI, phi=LP_PHI_RHS)
    if name == "distributed_demo":
        return distributed_lift(_demo_agents(), DEMO_LAPLACIAN)
    raise ValueError(f"unknown builtin problem {name!r}; choose from {BUILTIN_NAMES}")


def builtin_reference(name: str) -> KktPoint:
    """Known KKT point for each bundled problem."""
    if name == "toy":
        return KktPoint(np.zeros(1), np.zeros(1), np.zeros(0))
    if name == "lp_example":
        return KktPoint(np.array([1.0, 2.0]), np.zeros(0), np.array([0.0, 0.0, 0.2, 1.2]))
    if name == "lp_strict":
        return KktPoint(np.array([1.0, 2.0]), np.zeros(0), np.array([0.0, 0.0, 0.2, 0.2]))
    if name == "distributed_demo":
        # interior consensus point: stationarity needs L mu = -theta, sum(mu) = 0
        return KktPoint(np.zeros(3), np.array([-1.0, 2.0, -1.0]) / 3.0, np.zeros(3))
    raise ValueError(f"unknown builtin problem {name!r}; choose from {BUILTIN_NAMES}")
