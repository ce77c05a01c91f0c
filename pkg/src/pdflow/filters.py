"""Diagonal filter sections and their stacked state-space realizations.

Each scalar section is a parallel sum of first-order terms with a mandatory
integrator,

    c1/s + c2/(s + a2) + ... + ck/(s + ak) + d,

realized as one state per term plus a direct feedthrough.  Sections driving
the inequality multipliers ("dual_ineq" kind) carry the nonnegativity
projection on every state and a max(0, .) on the feedthrough path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

Array = np.ndarray

KINDS = ("primal", "dual_eq", "dual_ineq")

__all__ = [
    "KINDS",
    "FilterSpec",
    "validate",
    "require_valid",
    "recombine",
    "has_stable_zero",
    "project_rhs",
    "filter_derivative",
    "filter_output",
    "FilterBank",
]


@dataclass(frozen=True)
class FilterSpec:
    """One diagonal entry of a filter bank.

    ``poles`` are the nonnegative shift parameters ``[0, a2, ..., ak]``
    (the leading integrator is mandatory), ``residues`` the matching
    positive weights, ``feedthrough`` the direct gain ``d >= 0``.
    """

    poles: tuple
    residues: tuple
    feedthrough: float = 0.0
    kind: str = "primal"

    def __post_init__(self):
        object.__setattr__(self, "poles", tuple(float(p) for p in self.poles))
        object.__setattr__(self, "residues", tuple(float(c) for c in self.residues))
        object.__setattr__(self, "feedthrough", float(self.feedthrough))

    @property
    def order(self) -> int:
        return len(self.poles)

    @classmethod
    def integrator(cls, kind="primal", gain=1.0):
        """Plain 1/s section (scaled by ``gain``)."""
        return cls(poles=(0.0,), residues=(gain,), feedthrough=0.0, kind=kind)

    @classmethod
    def pi(cls, kind="primal", gain=1.0, feedthrough=1.0):
        """Proportional-plus-integral section (s + 1)/s for the defaults."""
        return cls(poles=(0.0,), residues=(gain,), feedthrough=feedthrough, kind=kind)


def validate(spec: FilterSpec) -> list:
    """Return the list of invariant violations (empty means valid)."""
    violations = []
    if spec.order < 1:
        violations.append("empty section: order must be at least 1")
    if len(spec.residues) != spec.order:
        violations.append(
            f"residue count {len(spec.residues)} does not match pole count {spec.order}"
        )
    if spec.order >= 1 and spec.poles and spec.poles[0] != 0.0:
        violations.append("missing integrator: first pole must be 0")
    if any(p < 0 for p in spec.poles):
        violations.append("negative pole")
    if any(b <= a for a, b in zip(spec.poles, spec.poles[1:])):
        violations.append("poles not increasing")
    if any(c <= 0 for c in spec.residues):
        violations.append("nonpositive residue")
    if spec.feedthrough < 0:
        violations.append("negative feedthrough")
    if spec.kind not in KINDS:
        violations.append(f"unknown kind {spec.kind!r}")
    return violations


def require_valid(spec: FilterSpec) -> FilterSpec:
    violations = validate(spec)
    if violations:
        raise ValueError("invalid filter section: " + "; ".join(violations))
    return spec


def recombine(spec: FilterSpec):
    """Collapse the partial fractions to numerator/denominator coefficients.

    Returns ``(num, den)`` in descending powers of s over the common
    denominator ``prod(s + a_k)``.
    """
    poles = np.asarray(spec.poles, dtype=float)
    den = np.poly(-poles)
    num = spec.feedthrough * den
    for k, c in enumerate(spec.residues):
        others = np.delete(poles, k)
        num = num + np.concatenate([[0.0], c * np.poly(-others)])
    return num, den


def has_stable_zero(spec: FilterSpec):
    """Check whether the section has at least one zero, all strictly stable.

    Returns ``(flag, zeros)`` where ``zeros`` are the numerator roots of
    the recombined transfer function.  The flag is true iff at least one
    zero exists and every zero has real part below -1e-12.
    """
    require_valid(spec)
    num, _ = recombine(spec)
    num = np.trim_zeros(num, "f")
    if num.size <= 1:
        return False, []
    zeros = np.roots(num)
    flag = bool(zeros.size > 0 and np.all(zeros.real < -1e-12))
    return flag, list(zeros)


def project_rhs(sigma, epsilon):
    """Nonnegativity projection of a derivative component.

    Returns 0 where the state ``epsilon`` sits at zero and the drive
    ``sigma`` points outward (negative); returns ``sigma`` otherwise.
    Extends elementwise to vectors.  A negative ``epsilon`` signals a
    corrupted nonnegative state and raises.
    """
    sig = np.asarray(sigma, dtype=float)
    eps = np.asarray(epsilon, dtype=float)
    if np.any(eps < 0):
        raise ValueError("negative epsilon: nonnegative state has drifted below zero")
    out = np.where((eps == 0.0) & (sig < 0.0), 0.0, sig)
    if np.isscalar(sigma) or sig.ndim == 0:
        return float(out)
    return out


def filter_derivative(spec: FilterSpec, state, u: float) -> Array:
    """State derivative of one section driven by scalar input ``u``."""
    state = np.asarray(state, dtype=float)
    if state.shape != (spec.order,):
        raise ValueError(f"state has shape {state.shape}, expected ({spec.order},)")
    der = np.asarray(spec.residues) * u - np.asarray(spec.poles) * state
    if spec.kind == "dual_ineq":
        der = project_rhs(der, state)
    return np.atleast_1d(der)


def filter_output(spec: FilterSpec, state, u: float) -> float:
    """Section output: state sum plus the feedthrough path."""
    state = np.asarray(state, dtype=float)
    if state.shape != (spec.order,):
        raise ValueError(f"state has shape {state.shape}, expected ({spec.order},)")
    if spec.kind == "dual_ineq":
        return float(state.sum() + spec.feedthrough * max(0.0, u))
    return float(state.sum() + spec.feedthrough * u)


class FilterBank:
    """Stacked realization of same-kind sections with flat state storage.

    The concatenated state keeps every section's entries contiguous;
    ``output`` and ``derivative`` act on the whole bank at once, which is
    what the simulation hot loop uses.
    """

    def __init__(self, specs: Sequence[FilterSpec], kind: str):
        if kind not in KINDS:
            raise ValueError(f"unknown kind {kind!r}")
        specs = tuple(specs)
        for s in specs:
            require_valid(s)
            if s.kind != kind:
                raise ValueError(f"section of kind {s.kind!r} placed in a {kind!r} bank")
        self.kind = kind
        self.specs = specs
        self.channels = len(specs)
        orders = np.array([s.order for s in specs], dtype=np.intp)
        self.orders = orders
        self.dim = int(orders.sum()) if self.channels else 0
        self.starts = np.concatenate([[0], np.cumsum(orders)[:-1]]).astype(np.intp) if self.channels else np.zeros(0, np.intp)
        self.poles = np.concatenate([np.asarray(s.poles) for s in specs]) if self.channels else np.zeros(0)
        self.residues = np.concatenate([np.asarray(s.residues) for s in specs]) if self.channels else np.zeros(0)
        self.feedthrough = np.array([s.feedthrough for s in specs], dtype=float)
        self.expand = np.repeat(np.arange(self.channels, dtype=np.intp), orders) if self.channels else np.zeros(0, np.intp)
        # hot-loop shortcuts
        self._all_first_order = bool(np.all(orders == 1)) if self.channels else True
        self._any_pole = bool(self.poles.any())
        self._any_d = bool(self.feedthrough.any())

    def _sums(self, state: Array) -> Array:
        if not self.channels:
            return np.zeros(0)
        if self._all_first_order:
            return state
        return np.add.reduceat(state, self.starts)

    def _spread(self, u: Array) -> Array:
        return u if self._all_first_order else u[self.expand]

    def output(self, state: Array, u=None) -> Array:
        """Per-channel outputs; ``u`` may be omitted for strictly proper banks."""
        out = self._sums(state)
        if self._any_d:
            if u is None:
                raise ValueError("bank has feedthrough; input required")
            if self.kind == "dual_ineq":
                return out + self.feedthrough * np.maximum(0.0, u)
            return out + self.feedthrough * u
        return out.copy() if out is state else out

    def derivative(self, state: Array, u: Array) -> Array:
        der = self.residues * self._spread(u)
        if self._any_pole:
            der = der - self.poles * state
        if self.kind == "dual_ineq" and self.dim:
            der[(state <= 0.0) & (der < 0.0)] = 0.0
        return der

    def storage_blocks(self, state: Array, ref: Array) -> Array:
        """Quadratic storage per channel around per-channel references.

        The reference enters only through the integrator state of each
        channel; the remaining states are penalized around zero.
        """
        if not self.channels:
            return np.zeros(0)
        dev = np.array(state, dtype=float)
        dev[self.starts] -= ref
        comps = dev * dev / (2.0 * self.residues)
        return np.add.reduceat(comps, self.starts) if not self._all_first_order else comps

    def storage_series(self, states: Array, ref: Array) -> Array:
        """Per-channel storage for a whole (T, dim) trajectory slab."""
        if not self.channels:
            return np.zeros((states.shape[0], 0))
        dev = np.array(states, dtype=float)
        dev[:, self.starts] -= ref
        comps = dev * dev / (2.0 * self.residues)
        if self._all_first_order:
            return comps
        return np.add.reduceat(comps, self.starts, axis=1)
