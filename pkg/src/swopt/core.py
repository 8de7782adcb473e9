"""Partitions of [0, 1], piecewise-constant controls and their norms.

All algorithm math lives on the normalized horizon [0, 1]. A control is a
right-open step function: interval ``k`` is ``[samples[k], samples[k+1])`` and
carries one continuous input vector and one mode-weight vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable

import numpy as np

from .errors import InvalidParameter, InvalidControl, NonRefinement

SIMPLEX_TOL = 1e-9
TIME_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Partition:
    """Nondecreasing samples ``0 = t_0 <= ... <= t_K = 1`` with mesh <= 2**-level.

    Zero-length intervals are allowed and kept.
    """

    samples: np.ndarray
    level: int = 0

    def __post_init__(self):
        s = np.array(self.samples, dtype=float).reshape(-1)
        if s.size < 2:
            raise InvalidControl("a partition needs at least two samples")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise InvalidControl(f"partition must start at 0 and end at 1, got {s[0]!r}..{s[-1]!r}")
        widths = np.diff(s)
        if np.any(widths < 0.0):
            raise InvalidControl("partition samples must be nondecreasing")
        if self.level < 0:
            raise InvalidControl("partition level must be >= 0")
        if widths.max() > 2.0 ** -self.level + TIME_TOL:
            raise InvalidControl(
                f"mesh {widths.max():.3g} exceeds 2^-{self.level}")
        object.__setattr__(self, "samples", _frozen(s))
        object.__setattr__(self, "level", int(self.level))

    @classmethod
    def uniform(cls, level: int) -> "Partition":
        """The dyadic grid with ``2**level`` equal intervals."""
        return cls(np.arange(2 ** level + 1) / 2.0 ** level, level)

    @classmethod
    def from_samples(cls, samples: Iterable[float]) -> "Partition":
        """Build a partition and certify the largest level its mesh allows."""
        s = np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples, dtype=float)
        return cls(s, mesh_level(s))

    @property
    def n_intervals(self) -> int:
        return self.samples.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.samples)

    @property
    def mesh(self) -> float:
        return float(self.widths.max())

    def locate(self, t: float) -> int:
        """Index of the interval containing ``t`` (right-open; t=1 maps to the last interval)."""
        k = int(np.searchsorted(self.samples, t, side="right")) - 1
        return min(max(k, 0), self.n_intervals - 1)

    def contains_all(self, times: np.ndarray, tol: float = TIME_TOL) -> bool:
        times = np.asarray(times, dtype=float)
        idx = np.clip(np.searchsorted(self.samples, times), 0, self.samples.size - 1)
        lo = np.clip(idx - 1, 0, self.samples.size - 1)
        gap = np.minimum(np.abs(self.samples[idx] - times), np.abs(self.samples[lo] - times))
        return bool(np.all(gap <= tol))

    def with_level(self, level: int) -> "Partition":
        return Partition(self.samples, level)

    def __len__(self) -> int:
        return self.samples.size

    def __repr__(self) -> str:
        return f"Partition(samples={self.samples.size}, level={self.level}, mesh={self.mesh:.4g})"


def mesh_level(samples: np.ndarray) -> int:
    """Largest ``N`` with every interval of ``samples`` at most ``2**-N`` long."""
    mesh = float(np.max(np.diff(samples)))
    if mesh <= 0.0:
        raise InvalidControl("degenerate partition")
    level = max(0, int(math.floor(-math.log2(mesh))))
    while level > 0 and mesh > 2.0 ** -level + TIME_TOL:
        level -= 1
    while mesh <= 2.0 ** -(level + 1) + TIME_TOL:
        level += 1
    return level


def union(*partitions: Partition, level: int | None = None) -> Partition:
    """Sorted union of the distinct samples of several partitions."""
    s = np.unique(np.concatenate([p.samples for p in partitions]))
    keep = np.concatenate(([True], np.diff(s) > TIME_TOL))
    s = s[keep]
    s[-1] = 1.0
    if level is None:
        level = max(p.level for p in partitions)
    return Partition(s, level)


@dataclass(frozen=True, eq=False)
class PiecewiseControl:
    """A pair (u, d) of step functions on ``partition``.

    ``u`` has shape (K, m) and ``d`` has shape (K, q). Relaxed controls keep
    every ``d`` row in the probability simplex; pure controls keep every row
    at a simplex corner.
    """

    partition: Partition
    u: np.ndarray
    d: np.ndarray
    pure: bool = False

    def __post_init__(self):
        K = self.partition.n_intervals
        u = np.array(self.u, dtype=float)
        d = np.array(self.d, dtype=float)
        if u.ndim == 1:
            u = u.reshape(K, -1) if u.size else np.zeros((K, 0))
        if d.ndim == 1:
            d = d.reshape(K, -1)
        if u.shape[0] != K or d.shape[0] != K:
            raise InvalidControl(
                f"expected {K} rows, got u{u.shape} d{d.shape}")
        if d.shape[1] < 1:
            raise InvalidControl("at least one mode is required")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(d))):
            raise InvalidControl("control values must be finite")
        if np.any(d < -SIMPLEX_TOL) or np.any(d > 1.0 + SIMPLEX_TOL):
            raise InvalidControl("mode weights must lie in [0, 1]")
        if np.any(np.abs(d.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise InvalidControl("mode weights must sum to one")
        if self.pure and not np.all((d == 0.0) | (d == 1.0)):
            raise InvalidControl("pure controls need 0/1 mode weights")
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "d", _frozen(d))

    @property
    def m(self) -> int:
        return self.u.shape[1]

    @property
    def q(self) -> int:
        return self.d.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.partition.n_intervals

    @classmethod
    def constant(cls, partition: Partition, u, d, pure: bool | None = None) -> "PiecewiseControl":
        K = partition.n_intervals
        u = np.tile(np.asarray(u, dtype=float).reshape(1, -1), (K, 1))
        d = np.tile(np.asarray(d, dtype=float).reshape(1, -1), (K, 1))
        if pure is None:
            pure = bool(np.all((d == 0.0) | (d == 1.0)))
        return cls(partition, u, d, pure)

    def value_at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate (u(t), d(t)) at one time or an array of times."""
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.partition.samples, t, side="right") - 1,
                    0, self.n_intervals - 1)
        return self.u[k], self.d[k]

    def as_relaxed(self) -> "PiecewiseControl":
        return replace(self, pure=False) if self.pure else self

    def promote(self) -> "PiecewiseControl":
        """Mark as pure; requires exact 0/1 weights."""
        return replace(self, pure=True)

    def __sub__(self, other: "PiecewiseControl") -> "ControlDirection":
        _check_same_grid(self, other)
        return ControlDirection(self.partition, self.u - other.u, self.d - other.d)

    def __repr__(self) -> str:
        kind = "pure" if self.pure else "relaxed"
        return f"PiecewiseControl({kind}, K={self.n_intervals}, m={self.m}, q={self.q})"


@dataclass(frozen=True, eq=False)
class ControlDirection:
    """An unconstrained element of the span of step functions on a partition."""

    partition: Partition
    u: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        K = self.partition.n_intervals
        u = np.array(self.u, dtype=float).reshape(K, -1) if np.size(self.u) else np.zeros((K, 0))
        d = np.array(self.d, dtype=float).reshape(K, -1)
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "d", _frozen(d))

    @classmethod
    def zeros_like(cls, c: PiecewiseControl) -> "ControlDirection":
        return cls(c.partition, np.zeros_like(c.u), np.zeros_like(c.d))

    def __add__(self, other: "ControlDirection") -> "ControlDirection":
        _check_same_grid(self, other)
        return ControlDirection(self.partition, self.u + other.u, self.d + other.d)

    def __mul__(self, s: float) -> "ControlDirection":
        return ControlDirection(self.partition, s * self.u, s * self.d)

    __rmul__ = __mul__

    def __neg__(self) -> "ControlDirection":
        return self * -1.0


def _check_same_grid(a, b) -> None:
    if a.partition is b.partition:
        return
    pa, pb = a.partition.samples, b.partition.samples
    if pa.shape != pb.shape or np.any(pa != pb):
        raise InvalidControl("operands live on different partitions")


def step(xi: PiecewiseControl, target: PiecewiseControl, lam: float) -> PiecewiseControl:
    """The relaxed point ``xi + lam * (target - xi)`` for ``lam`` in [0, 1]."""
    _check_same_grid(xi, target)
    u = xi.u + lam * (target.u - xi.u)
    d = xi.d + lam * (target.d - xi.d)
    # convex combinations of simplex rows drift by at most a few ulps
    d = np.clip(d, 0.0, 1.0)
    return PiecewiseControl(xi.partition, u, d, pure=False)


def x_norm(a: ControlDirection | PiecewiseControl) -> float:
    """``||u||_L2 + ||d||_L2`` of a step function, computed exactly."""
    w = a.partition.widths
    nu = math.sqrt(float(np.dot(w, np.sum(a.u * a.u, axis=1)))) if a.u.size else 0.0
    nd = math.sqrt(float(np.dot(w, np.sum(a.d * a.d, axis=1))))
    return nu + nd


def _total_variation(values: np.ndarray, widths: np.ndarray) -> float:
    v = values[widths > 0.0]
    if v.shape[0] < 2 or v.size == 0:
        return 0.0
    return float(np.abs(np.diff(v, axis=0)).sum())


def bv_seminorm(c: PiecewiseControl | ControlDirection) -> float:
    """Total variation of ``u`` plus total variation of ``d``.

    Zero-length intervals are never attained as function values and are skipped.
    """
    w = c.partition.widths
    return _total_variation(c.u, w) + _total_variation(c.d, w)


def refine_onto(c: PiecewiseControl, p: Partition) -> PiecewiseControl:
    """Resample ``c`` onto a partition that contains all of its breakpoints."""
    if not p.contains_all(c.partition.samples):
        raise NonRefinement("target partition misses a breakpoint of the control")
    s = p.samples
    k = np.clip(np.searchsorted(c.partition.samples, s[:-1], side="right") - 1,
                0, c.n_intervals - 1)
    return PiecewiseControl(p, c.u[k], c.d[k], c.pure)


@dataclass(frozen=True)
class AlgoParams:
    alpha: float = 0.1
    beta: float = 0.87
    alpha_bar: float = 0.005
    beta_bar: float = 0.72
    gamma: float = 1.0
    omega: float = 1e-6
    Lambda: float = 1e-4
    chi: float = 0.25
    eta: int = 2
    N0: int = 4
    theta_stop: float = -1e-2
    mu_cap: int = 60
    subproblem_tol: float = 1e-8
    iter_cap: int = 500
    N_cap: int = 14

    def __post_init__(self):
        checks = [
            ("alpha", 0.0 < self.alpha < 1.0, "(0, 1)"),
            ("beta", 0.0 < self.beta < 1.0, "(0, 1)"),
            ("alpha_bar", 0.0 < self.alpha_bar < math.inf, "(0, inf)"),
            ("beta_bar", 1.0 / math.sqrt(2.0) < self.beta_bar < 1.0, "(1/sqrt(2), 1)"),
            ("gamma", 0.0 < self.gamma < math.inf, "(0, inf)"),
            ("omega", 0.0 < self.omega < 1.0, "(0, 1)"),
            ("Lambda", 0.0 < self.Lambda < math.inf, "(0, inf)"),
            ("chi", 0.0 < self.chi < 0.5, "(0, 1/2)"),
            ("eta", self.eta >= 0 and float(self.eta).is_integer(), "integers >= 0"),
            ("N0", self.N0 >= 0 and float(self.N0).is_integer(), "integers >= 0"),
            ("theta_stop", self.theta_stop < 0.0, "(-inf, 0)"),
            ("mu_cap", self.mu_cap >= 1 and float(self.mu_cap).is_integer(), "integers >= 1"),
            ("subproblem_tol", self.subproblem_tol > 0.0, "(0, inf)"),
            ("iter_cap", self.iter_cap >= 1 and float(self.iter_cap).is_integer(), "integers >= 1"),
            ("N_cap", self.N_cap >= 0 and float(self.N_cap).is_integer(), "integers >= 0"),
        ]
        for name, ok, rng in checks:
            if not ok:
                raise InvalidParameter(f"{name}={getattr(self, name)!r} outside {rng}")
        for name in ("eta", "N0", "mu_cap", "iter_cap", "N_cap"):
            object.__setattr__(self, name, int(getattr(self, name)))

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def updated(self, **overrides) -> "AlgoParams":
        unknown = set(overrides) - set(self.field_names())
        if unknown:
            raise InvalidParameter(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        return replace(self, **overrides)
