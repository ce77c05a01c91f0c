"""Closed-loop dynamics assembly, output resolution, and fixed-step integration.

The simulated system couples a convex problem's first-order oracles with
three diagonal filter banks: primal sections map the stationarity signal v
to the iterate x, equality sections map h = Ax - b to the multiplier mu,
and projected sections map w = g(x) to the nonnegative multiplier lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .filters import FilterBank, FilterSpec
from .problems import ConvexProblem, DimensionMismatch, KktPoint

Array = np.ndarray

__all__ = [
    "DynamicsSystem",
    "SolverState",
    "ResolvedSignals",
    "NoiseModel",
    "NoiseStream",
    "Trajectory",
    "IntegratorConfig",
    "LoopDivergence",
    "IntegrationError",
    "assemble",
    "resolve_outputs",
    "rhs",
    "integrate",
    "equilibrium_state",
    "trajectory_to_csv",
    "trajectory_to_json",
]

LOOP_TOL = 1e-12
LOOP_MAX_ITERS = 200
LOOP_DAMPING = 0.5


class LoopDivergence(RuntimeError):
    """The output algebraic loop failed to converge (ill-posed feedthrough)."""


class IntegrationError(RuntimeError):
    """Integration aborted; the partial trajectory is attached.

    ``reason`` is ``"blow_up"`` or ``"loop_divergence"``.
    """

    def __init__(self, reason: str, trajectory: "Trajectory", message: str):
        super().__init__(message)
        self.reason = reason
        self.trajectory = trajectory


@dataclass(frozen=True)
class SolverState:
    """Concatenated filter states (xi, zeta, rho), one array per bank."""

    xi: Array
    zeta: Array
    rho: Array

    def __post_init__(self):
        for name in ("xi", "zeta", "rho"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)) if np.size(getattr(self, name)) else np.zeros(0))


@dataclass(frozen=True)
class ResolvedSignals:
    """Loop-consistent signal snapshot: iterate, multipliers, and drives."""

    x: Array
    mu: Array
    lam: Array
    v: Array
    h: Array
    w: Array


class DynamicsSystem:
    """Assembled closed loop: problem oracles plus the three filter banks."""

    def __init__(self, problem: ConvexProblem, m_bank: FilterBank, h_bank: FilterBank, g_bank: FilterBank):
        self.problem = problem
        self.m_bank = m_bank
        self.h_bank = h_bank
        self.g_bank = g_bank
        self.nbar = m_bank.dim
        self.rbar = h_bank.dim
        self.mbar = g_bank.dim
        self.state_dim = self.nbar + self.rbar + self.mbar
        self.has_output_loop = m_bank._any_d

        # hot-loop caches: raw oracles and equality data
        self._grad = problem.grad
        self._g = problem.ineq
        self._gg = problem.ineq_grad
        self._A = problem.eq_matrix
        self._AT = problem.eq_matrix.T.copy()
        self._b = problem.eq_vector
        self._r = problem.r
        self._m = problem.m

        banks = (m_bank, h_bank, g_bank)
        offsets = (0, problem.n, problem.n + problem.r)
        self._poles_all = np.concatenate([b.poles for b in banks])
        self._res_all = np.concatenate([b.residues for b in banks])
        self._expand_all = np.concatenate(
            [b.expand + off for b, off in zip(banks, offsets)]
        ).astype(np.intp)
        self._any_pole_all = bool(self._poles_all.any())
        self._rho_from = self.nbar + self.rbar

    def zero_state(self) -> SolverState:
        return SolverState(np.zeros(self.nbar), np.zeros(self.rbar), np.zeros(self.mbar))

    def pack(self, state: SolverState) -> Array:
        if (state.xi.shape[0], state.zeta.shape[0], state.rho.shape[0]) != (self.nbar, self.rbar, self.mbar):
            raise DimensionMismatch(
                f"state blocks have lengths {(state.xi.shape[0], state.zeta.shape[0], state.rho.shape[0])}, "
                f"expected {(self.nbar, self.rbar, self.mbar)}"
            )
        return np.concatenate([state.xi, state.zeta, state.rho])

    def unpack(self, y: Array) -> SolverState:
        nb, rb = self.nbar, self.rbar
        return SolverState(y[:nb].copy(), y[nb : nb + rb].copy(), y[nb + rb :].copy())

    def column_labels(self) -> list:
        cols = ["t"]
        for prefix, bank in (("xi", self.m_bank), ("zeta", self.h_bank), ("rho", self.g_bank)):
            for i, spec in enumerate(bank.specs):
                cols += [f"{prefix}_{i + 1}_{k + 1}" for k in range(spec.order)]
        for prefix, count in (
            ("x", self.problem.n),
            ("mu", self.problem.r),
            ("lambda", self.problem.m),
            ("v", self.problem.n),
            ("h", self.problem.r),
            ("w", self.problem.m),
        ):
            cols += [f"{prefix}_{i + 1}" for i in range(count)]
        return cols


def assemble(
    problem: ConvexProblem,
    m_specs: Sequence[FilterSpec],
    h_specs: Sequence[FilterSpec],
    g_specs: Sequence[FilterSpec],
) -> DynamicsSystem:
    """Build the closed-loop system, checking counts and section validity."""
    if len(m_specs) != problem.n:
        raise DimensionMismatch(f"{len(m_specs)} primal sections for an n={problem.n} problem")
    if len(h_specs) != problem.r:
        raise DimensionMismatch(f"{len(h_specs)} equality sections for an r={problem.r} problem")
    if len(g_specs) != problem.m:
        raise DimensionMismatch(f"{len(g_specs)} inequality sections for an m={problem.m} problem")
    return DynamicsSystem(
        problem,
        FilterBank(m_specs, "primal"),
        FilterBank(h_specs, "dual_eq"),
        FilterBank(g_specs, "dual_ineq"),
    )


def _close_signals(sys: DynamicsSystem, x, zeta, rho, shift):
    """Signals downstream of a given iterate x (one pass, no loop)."""
    if sys._r:
        h = sys._A @ x - sys._b
        mu = sys.h_bank.output(zeta, h)
    else:
        h = np.zeros(0)
        mu = np.zeros(0)
    if sys._m:
        w = sys._g(x)
        lam = sys.g_bank.output(rho, w)
    else:
        w = np.zeros(0)
        lam = np.zeros(0)
    acc = sys._grad(x)
    if shift is not None:
        acc = acc + shift
    if sys._m:
        acc = acc + sys._gg(x) @ lam
    if sys._r:
        acc = acc + sys._AT @ mu
    v = -acc
    return mu, lam, v, h, w


def _resolve_flat(sys: DynamicsSystem, y: Array, hint=None, shift=None):
    nb, rb = sys.nbar, sys.rbar
    xi = y[:nb]
    zeta = y[nb : nb + rb]
    rho = y[nb + rb :]
    xi_sums = sys.m_bank._sums(xi)

    if not sys.has_output_loop:
        x = xi_sums
        mu, lam, v, h, w = _close_signals(sys, x, zeta, rho, shift)
        return x, mu, lam, v, h, w, 0

    # x depends on v through the primal feedthrough: iterate x -> sums + d*v(x).
    # The first step is undamped (exact for input-independent loops, the only
    # class with a guarantee); later steps are damped to tame negative loop
    # gains from curved costs.
    d = sys.m_bank.feedthrough
    x = np.asarray(hint, dtype=float) if hint is not None else xi_sums
    for k in range(LOOP_MAX_ITERS):
        mu, lam, v, h, w = _close_signals(sys, x, zeta, rho, shift)
        target = xi_sums + d * v
        gap = float(np.max(np.abs(target - x))) if target.size else 0.0
        if gap <= LOOP_TOL:
            return x, mu, lam, v, h, w, k + 1
        if not math.isfinite(gap):
            raise LoopDivergence("output loop produced non-finite iterates")
        x = target if k == 0 else LOOP_DAMPING * x + (1.0 - LOOP_DAMPING) * target
    raise LoopDivergence(
        f"output loop did not reach {LOOP_TOL:g} within {LOOP_MAX_ITERS} iterations"
    )


def _derivative_flat(sys: DynamicsSystem, y: Array, v, h, w) -> Array:
    inp = np.concatenate((v, h, w))
    der = sys._res_all * inp[sys._expand_all]
    if sys._any_pole_all:
        der -= sys._poles_all * y
    if sys.mbar:
        rho = y[sys._rho_from :]
        drho = der[sys._rho_from :]
        drho[(rho <= 0.0) & (drho < 0.0)] = 0.0
    return der


def resolve_outputs(system: DynamicsSystem, state: SolverState, hint=None) -> ResolvedSignals:
    """Resolve the output equations at a frozen filter state.

    Without primal feedthrough the pass is direct and exact.  With
    feedthrough, a fixed-point iteration on x runs from ``hint`` (default:
    the xi block sums) to tolerance 1e-12; failure to converge raises
    :class:`LoopDivergence`.
    """
    y = system.pack(state)
    x, mu, lam, v, h, w, _ = _resolve_flat(system, y, hint=hint)
    return ResolvedSignals(x=x.copy(), mu=mu, lam=lam, v=v, h=h, w=w)


def rhs(system: DynamicsSystem, state: SolverState, noise_perturbation=None) -> SolverState:
    """State derivative at ``state``; rho components are projected.

    ``noise_perturbation`` is added to the cost gradient for this
    evaluation.  The returned container holds derivative blocks, not a
    feasible state (rho entries may be negative).
    """
    y = system.pack(state)
    shift = None
    if noise_perturbation is not None:
        shift = np.asarray(noise_perturbation, dtype=float)
        if shift.shape != (system.problem.n,):
            raise DimensionMismatch(
                f"perturbation has shape {shift.shape}, expected ({system.problem.n},)"
            )
    x, mu, lam, v, h, w, _ = _resolve_flat(system, y, shift=shift)
    der = _derivative_flat(system, y, v, h, w)
    return system.unpack(der)


def equilibrium_state(system: DynamicsSystem, point: KktPoint) -> SolverState:
    """State whose block sums reproduce a KKT point with all lead states zero."""
    state = system.zero_state()
    if system.nbar:
        state.xi[system.m_bank.starts] = np.asarray(point.x, dtype=float)
    if system.rbar:
        state.zeta[system.h_bank.starts] = np.asarray(point.mu, dtype=float)
    if system.mbar:
        state.rho[system.g_bank.starts] = np.asarray(point.lam, dtype=float)
    return state


# ---------------------------------------------------------------------------
# noise

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO53 = float(1 << 53)


def _splitmix(seed: int, k: int) -> int:
    z = (seed + (k + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _gaussian(seed: int, index: int) -> float:
    # counter-based stream: two uniforms per draw through a Box-Muller map
    z1 = _splitmix(seed, 2 * index)
    z2 = _splitmix(seed, 2 * index + 1)
    u1 = ((z1 >> 11) + 1) / _TWO53  # in (0, 1], keeps the log finite
    u2 = (z2 >> 11) / _TWO53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@dataclass(frozen=True)
class NoiseModel:
    """Band-limited Gaussian perturbation of the cost's linear term.

    White Gaussian draws (std ``sigma`` per step) pass through a
    first-order high-pass with corner ``cutoff`` rad/s, discretized by the
    bilinear transform at the integration step.  Streams are reproducible
    from ``seed`` alone.
    """

    sigma: float
    cutoff: float
    seed: int
    target: str = "theta"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.target != "theta":
            raise ValueError(f"unsupported noise target {self.target!r}")


class NoiseStream:
    """Stateful per-step sampler for one integration run."""

    def __init__(self, model: NoiseModel, step: float, dim: int):
        if step <= 0:
            raise ValueError("step must be positive")
        self.model = model
        self.dim = dim
        self._seed = model.seed & _MASK64
        K = 2.0 / step
        denom = K + model.cutoff
        self._b0 = K / denom
        self._b1 = -K / denom
        self._a1 = (model.cutoff - K) / denom
        self._carry = [0.0] * dim
        self._index = 0

    def sample(self) -> Array:
        """Draw and filter one perturbation vector (one call per step)."""
        out = np.zeros(self.dim)
        if self.model.sigma == 0.0:
            self._index += self.dim
            return out
        b0, b1, a1 = self._b0, self._b1, self._a1
        carry = self._carry
        base = self._index
        for j in range(self.dim):
            u = self.model.sigma * _gaussian(self._seed, base + j)
            y = b0 * u + carry[j]
            carry[j] = b1 * u - a1 * y
            out[j] = y
        self._index = base + self.dim
        return out


# ---------------------------------------------------------------------------
# integration

@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    step: float = 1e-3
    horizon: float = 100.0
    record_every: int = 10

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown method {self.method!r}; use 'euler' or 'rk4'")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")


@dataclass
class Trajectory:
    """Recorded run: sample times, filter states, and resolved signals."""

    times: Array
    xi: Array
    zeta: Array
    rho: Array
    x: Array
    mu: Array
    lam: Array
    v: Array
    h: Array
    w: Array
    columns: list
    meta: dict
    storage: object = None

    def __len__(self):
        return self.times.shape[0]

    def row_matrix(self) -> Array:
        return np.column_stack(
            [self.times, self.xi, self.zeta, self.rho, self.x, self.mu, self.lam, self.v, self.h, self.w]
        )


class _Recorder:
    def __init__(self, system: DynamicsSystem, capacity: int):
        p = system.problem
        self.t = np.zeros(capacity)
        self.state = np.zeros((capacity, system.state_dim))
        self.x = np.zeros((capacity, p.n))
        self.mu = np.zeros((capacity, p.r))
        self.lam = np.zeros((capacity, p.m))
        self.v = np.zeros((capacity, p.n))
        self.h = np.zeros((capacity, p.r))
        self.w = np.zeros((capacity, p.m))
        self.count = 0

    def push(self, t, y, x, mu, lam, v, h, w):
        i = self.count
        self.t[i] = t
        self.state[i] = y
        self.x[i] = x
        self.mu[i] = mu
        self.lam[i] = lam
        self.v[i] = v
        self.h[i] = h
        self.w[i] = w
        self.count = i + 1

    def finish(self, system: DynamicsSystem, meta: dict) -> Trajectory:
        nb, rb = system.nbar, system.rbar
        c = self.count
        state = self.state[:c]
        return Trajectory(
            times=self.t[:c].copy(),
            xi=state[:, :nb].copy(),
            zeta=state[:, nb : nb + rb].copy(),
            rho=state[:, nb + rb :].copy(),
            x=self.x[:c].copy(),
            mu=self.mu[:c].copy(),
            lam=self.lam[:c].copy(),
            v=self.v[:c].copy(),
            h=self.h[:c].copy(),
            w=self.w[:c].copy(),
            columns=system.column_labels(),
            meta=meta,
        )


def integrate(
    system: DynamicsSystem,
    initial: SolverState,
    config: IntegratorConfig = IntegratorConfig(),
    noise: Optional[NoiseModel] = None,
) -> Trajectory:
    """Fixed-step integration of the projected closed loop.

    The rho block is clamped to the nonnegative orthant after every step
    (and at internal stage states), which removes the O(step) discretization
    undershoot at the projection boundary.  Every k-th step is recorded
    along with loop-consistent signals; the final state is always recorded.
    Blow-up and loop divergence abort with the partial trajectory attached
    to the raised :class:`IntegrationError`.
    """
    y = system.pack(initial)
    rho0 = y[system._rho_from :]
    if rho0.size and rho0.min() < 0:
        raise ValueError("initial rho must be nonnegative")

    hstep = config.step
    num_steps = max(1, int(round(config.horizon / hstep)))
    rec_every = config.record_every
    capacity = num_steps // rec_every + 2
    rec = _Recorder(system, capacity)

    stream = NoiseStream(noise, hstep, system.problem.n) if noise is not None else None

    meta = {
        "method": config.method,
        "step": hstep,
        "horizon": num_steps * hstep,
        "record_every": rec_every,
        "noise": None if noise is None else {"sigma": noise.sigma, "cutoff": noise.cutoff, "seed": noise.seed},
        "max_undershoot": 0.0,
        "max_loop_iters": 0,
        "aborted": None,
    }

    rho_from = system._rho_from
    has_rho = system.mbar > 0
    rk4 = config.method == "rk4"
    half = 0.5 * hstep
    sixth = hstep / 6.0
    hint = None
    max_under = 0.0
    max_iters = 0

    def abort(reason, message, k):
        meta["aborted"] = reason
        meta["max_undershoot"] = max_under
        meta["max_loop_iters"] = max_iters
        raise IntegrationError(reason, rec.finish(system, meta), f"{message} at step {k}")

    for k in range(num_steps + 1):
        t = k * hstep
        shift = stream.sample() if stream is not None else None
        try:
            x, mu, lam, v, h, w, iters = _resolve_flat(system, y, hint=hint, shift=shift)
        except LoopDivergence as exc:
            abort("loop_divergence", str(exc), k)
        hint = x
        if iters > max_iters:
            max_iters = iters
        if k % rec_every == 0 or k == num_steps:
            rec.push(t, y, x, mu, lam, v, h, w)
        if k == num_steps:
            break

        k1 = _derivative_flat(system, y, v, h, w)
        if rk4:
            try:
                y2 = y + half * k1
                if has_rho:
                    np.maximum(y2[rho_from:], 0.0, out=y2[rho_from:])
                xs, _, _, vs, hs, ws, _ = _resolve_flat(system, y2, hint=hint, shift=shift)
                k2 = _derivative_flat(system, y2, vs, hs, ws)
                y3 = y + half * k2
                if has_rho:
                    np.maximum(y3[rho_from:], 0.0, out=y3[rho_from:])
                xs, _, _, vs, hs, ws, _ = _resolve_flat(system, y3, hint=xs, shift=shift)
                k3 = _derivative_flat(system, y3, vs, hs, ws)
                y4 = y + hstep * k3
                if has_rho:
                    np.maximum(y4[rho_from:], 0.0, out=y4[rho_from:])
                xs, _, _, vs, hs, ws, _ = _resolve_flat(system, y4, hint=xs, shift=shift)
                k4 = _derivative_flat(system, y4, vs, hs, ws)
            except LoopDivergence as exc:
                abort("loop_divergence", str(exc), k)
            hint = xs
            y_new = y + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        else:
            y_new = y + hstep * k1

        if has_rho:
            pre = y_new[rho_from:].min() if y_new[rho_from:].size else 0.0
            if pre < -max_under:
                max_under = -pre
            np.maximum(y_new[rho_from:], 0.0, out=y_new[rho_from:])
        if not math.isfinite(float(y_new.sum())):
            abort("blow_up", "state became non-finite", k + 1)
        y = y_new

    meta["max_undershoot"] = max_under
    meta["max_loop_iters"] = max_iters
    return rec.finish(system, meta)


def trajectory_to_csv(trajectory: Trajectory, path) -> None:
    """Write the recorded samples as CSV with the canonical column order."""
    rows = trajectory.row_matrix()
    with open(path, "w") as fh:
        fh.write(",".join(trajectory.columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(val) for val in row) + "\n")


def trajectory_to_json(trajectory: Trajectory, path) -> None:
    """Write the same table as JSON: column names plus row-major data."""
    import json

    payload = {
        "columns": trajectory.columns,
        "data": trajectory.row_matrix().tolist(),
        "meta": trajectory.meta,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")
