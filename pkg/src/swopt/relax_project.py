"""Projection of relaxed controls onto pure switching signals.

``haar_partial_sum`` truncates the Haar expansion of a step function after
level ``N``; ``pwm`` turns simplex-valued weights into a pure schedule with one
pulse per mode in each frame of length ``2**-N``; ``rho`` composes the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SIMPLEX_TOL, Partition, PiecewiseControl
from .errors import InvalidControl, SimplexViolation

BOX_CLIP_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DyadicSignal:
    """Step function with ``2**level`` equal cells; values shaped (2**level,) or (2**level, dim)."""

    level: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape[0] != 2 ** self.level:
            raise InvalidControl(f"expected {2 ** self.level} cells, got {v.shape[0]}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def samples(self) -> np.ndarray:
        return np.arange(2 ** self.level + 1) / 2.0 ** self.level

    def at(self, t) -> np.ndarray:
        idx = np.clip(np.floor(np.asarray(t) * 2 ** self.level).astype(int), 0, 2 ** self.level - 1)
        return self.values[idx]


def _cumulative(samples: np.ndarray, values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Exact integral of the step function from 0 to each ``t``."""
    w = np.diff(samples)
    prefix = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(w[:, None] * values, axis=0)])
    k = np.clip(np.searchsorted(samples, t, side="right") - 1, 0, w.size - 1)
    return prefix[k] + (t - samples[k])[:, None] * values[k]


def haar_coefficients(samples, values, N: int):
    """Mean and wavelet inner products ``<c, b_kj>`` for ``k = 0..N``.

    Returns ``(mean, [coef_0, ..., coef_N])`` where ``coef_k`` has shape
    ``(2**k, dim)``.
    """
    samples = np.asarray(samples, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    L = N + 1
    grid = np.arange(2 ** L + 1) / 2.0 ** L
    C = _cumulative(samples, values, grid)
    mean = C[-1] - C[0]
    coefs = []
    for k in range(N + 1):
        stride = 2 ** (L - k)
        left = C[0:-1:stride]
        mid = C[stride // 2::stride]
        right = C[stride::stride]
        coefs.append((mid - left) - (right - mid))
    return mean, coefs


def haar_partial_sum(samples, values, N: int) -> DyadicSignal:
    """Haar partial sum through level ``N`` of a step function, returned at level ``N+1``.

    ``samples`` are the breakpoints on [0, 1] and ``values`` holds one row per
    interval. Inner products are exact integrals of the step function.
    """
    if N < 0:
        raise InvalidControl("N must be >= 0")
    values = np.asarray(values, dtype=float)
    scalar = values.ndim == 1
    mean, coefs = haar_coefficients(samples, values, N)
    L = N + 1
    cells = np.arange(2 ** L)
    out = np.tile(mean, (2 ** L, 1))
    for k, ck in enumerate(coefs):
        j = cells >> (L - k)
        sign = np.where((cells >> (L - k - 1)) & 1, -1.0, 1.0)
        # b_kj / ||b_kj||^2 with ||b_kj||^2 = 2^-k
        out += (2.0 ** k) * sign[:, None] * ck[j]
    return DyadicSignal(L, out[:, 0] if scalar else out)


def cell_averages(samples, values, level: int) -> np.ndarray:
    """Average of a step function over each cell of the dyadic grid at ``level``."""
    values = np.asarray(values, dtype=float)
    v2 = values[:, None] if values.ndim == 1 else values
    grid = np.arange(2 ** level + 1) / 2.0 ** level
    C = _cumulative(np.asarray(samples, dtype=float), v2, grid)
    avg = np.diff(C, axis=0) * 2.0 ** level
    return avg[:, 0] if values.ndim == 1 else avg


def project_relaxed(xi: PiecewiseControl, N: int) -> DyadicSignal:
    """Componentwise Haar truncation of the mode weights; stays in the simplex."""
    sig = haar_partial_sum(xi.partition.samples, xi.d, N)
    d = sig.values
    if np.any(d < -SIMPLEX_TOL) or np.any(d > 1.0 + SIMPLEX_TOL) \
            or np.any(np.abs(d.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise SimplexViolation("Haar truncation of mode weights left the simplex")
    return DyadicSignal(sig.level, np.clip(d, 0.0, 1.0))


def pwm(d: DyadicSignal, N: int) -> tuple[Partition, np.ndarray]:
    """Pulse-width modulate simplex weights with frame length ``2**-N``.

    Within frame ``k`` mode ``i`` is active on
    ``[2^-N (k + sum_{j<i} w_j), 2^-N (k + sum_{j<=i} w_j))`` where ``w`` are the
    weights at the frame's left endpoint. Returns the induced partition (with
    ``1 + q 2^N`` samples, zero-length pulses kept) and the pure mode weights
    of its ``q 2^N`` intervals.
    """
    if d.level < N:
        raise InvalidControl(f"weights at level {d.level} cannot be sampled at frame level {N}")
    vals = d.values if d.values.ndim == 2 else d.values[:, None]
    q = vals.shape[1]
    frames = 2 ** N
    w = vals[:: 2 ** (d.level - N)][:frames]
    if np.any(w < -SIMPLEX_TOL) or np.any(np.abs(w.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise SimplexViolation("pwm input is not simplex-valued")
    cum = np.clip(np.cumsum(np.clip(w, 0.0, None), axis=1), 0.0, 1.0)
    cum[:, -1] = 1.0
    cum = np.maximum.accumulate(cum, axis=1)
    k = np.arange(frames)[:, None]
    times = ((k + cum) / 2.0 ** N).reshape(-1)
    samples = np.concatenate([[0.0], times])
    samples = np.maximum.accumulate(samples)
    samples[-1] = 1.0
    modes = np.tile(np.eye(q), (frames, 1))
    return Partition(samples, N), modes


def induced_partition(xi: PiecewiseControl, N: int) -> Partition:
    """The partition generated by modulating the Haar-truncated mode weights of ``xi``."""
    return pwm(project_relaxed(xi, N), N)[0]


def rho(xi: PiecewiseControl, box: np.ndarray, N: int) -> tuple[PiecewiseControl, Partition]:
    """Project a relaxed control to a pure one on the induced partition.

    The continuous input is Haar-truncated, clipped into ``box`` and sampled at
    the left endpoint of each pulse; the mode weights are truncated and
    modulated.
    """
    part, modes = pwm(project_relaxed(xi, N), N)
    left = part.samples[:-1]
    if xi.m:
        fu = haar_partial_sum(xi.partition.samples, xi.u, N)
        box = np.asarray(box, dtype=float).reshape(xi.m, 2)
        u = fu.at(left).reshape(left.size, xi.m)
        if np.any(u < box[:, 0] - BOX_CLIP_TOL - 1e-9 * np.abs(box[:, 0])) \
                or np.any(u > box[:, 1] + BOX_CLIP_TOL + 1e-9 * np.abs(box[:, 1])):
            raise SimplexViolation("Haar truncation of the input left its box")
        u = np.clip(u, box[:, 0], box[:, 1])
    else:
        u = np.zeros((left.size, 0))
    return PiecewiseControl(part, u, modes, pure=True), part
