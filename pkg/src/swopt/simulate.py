"""Forward-Euler integration, cost and constraint evaluation, and sensitivities.

Models are posed on their own horizon ``[t0, tf]``; every routine here works on
the normalized horizon ``[0, 1]`` by scaling the fields with ``tf - t0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import ControlDirection, Partition, PiecewiseControl
from .errors import InvalidControl, NonFinite, OutOfRange

BLOWUP = 1e12

Field = Callable[[float, np.ndarray, np.ndarray, int], np.ndarray]


class _Unconstrained:
    """Marker returned as the constraint value of a model without constraints."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Unconstrained"

    def __reduce__(self):
        return (_Unconstrained, ())


Unconstrained = _Unconstrained()


def psi_number(psi) -> float:
    """Numeric view of a constraint value: the marker reads as -inf."""
    return -np.inf if psi is Unconstrained else float(psi)


@dataclass(frozen=True)
class Constraint:
    h: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    name: str = ""


@dataclass(frozen=True, eq=False)
class SystemModel:
    """A switched system ``x' = f(t, x, u, i)`` with terminal cost and state constraints."""

    n: int
    m: int
    q: int
    vector_field: Field
    jac_x: Field
    jac_u: Field
    terminal_cost: Callable[[np.ndarray], float]
    terminal_cost_grad: Callable[[np.ndarray], np.ndarray]
    constraints: Sequence[Constraint] = ()
    input_box: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    x0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t0: float = 0.0
    tf: float = 1.0
    name: str = "model"

    def __post_init__(self):
        if self.q < 1:
            raise InvalidControl("a model needs at least one mode")
        box = np.array(self.input_box, dtype=float).reshape(self.m, 2)
        if np.any(box[:, 0] > box[:, 1]):
            raise InvalidControl("input box has lo > hi")
        x0 = np.array(self.x0, dtype=float).reshape(self.n)
        if not self.tf > self.t0:
            raise InvalidControl("horizon must satisfy tf > t0")
        object.__setattr__(self, "input_box", box)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    @property
    def duration(self) -> float:
        return self.tf - self.t0

    def real_time(self, s):
        return self.t0 + np.asarray(s, dtype=float) * self.duration

    # fields on the normalized horizon
    def f(self, s: float, x, u, i: int) -> np.ndarray:
        return self.duration * np.asarray(self.vector_field(self.t0 + s * self.duration, x, u, i), dtype=float)

    def fx(self, s: float, x, u, i: int) -> np.ndarray:
        return self.duration * np.asarray(self.jac_x(self.t0 + s * self.duration, x, u, i), dtype=float).reshape(self.n, self.n)

    def fu(self, s: float, x, u, i: int) -> np.ndarray:
        return self.duration * np.asarray(self.jac_u(self.t0 + s * self.duration, x, u, i), dtype=float).reshape(self.n, self.m)

    def jacobian_error(self, rng: np.random.Generator, probes: int = 10, h: float = 1e-6,
                       scale: float = 1.0, center=None) -> float:
        """Worst relative gap between the Jacobians and central differences of the field."""
        worst = 0.0
        for _ in range(probes):
            t = rng.uniform(self.t0, self.tf)
            x = (self.x0 if center is None else np.asarray(center, float)) + scale * rng.standard_normal(self.n)
            lo, hi = self.input_box[:, 0], self.input_box[:, 1]
            u = rng.uniform(lo, hi) if self.m else np.zeros(0)
            for i in range(self.q):
                ax = np.asarray(self.jac_x(t, x, u, i), dtype=float).reshape(self.n, self.n)
                au = np.asarray(self.jac_u(t, x, u, i), dtype=float).reshape(self.n, self.m)
                nx = np.empty_like(ax)
                for c in range(self.n):
                    e = np.zeros(self.n)
                    e[c] = h
                    nx[:, c] = (self.vector_field(t, x + e, u, i) - self.vector_field(t, x - e, u, i)) / (2 * h)
                nu = np.empty_like(au)
                for c in range(self.m):
                    e = np.zeros(self.m)
                    e[c] = h
                    nu[:, c] = (self.vector_field(t, x, u + e, i) - self.vector_field(t, x, u - e, i)) / (2 * h)
                for a, b in ((ax, nx), (au, nu)):
                    if a.size:
                        den = max(1.0, float(np.abs(b).max()))
                        worst = max(worst, float(np.abs(a - b).max()) / den)
        return worst


@dataclass(frozen=True, eq=False)
class DiscreteTrajectory:
    partition: Partition
    nodes: np.ndarray

    def __post_init__(self):
        self.nodes.setflags(write=False)

    @property
    def final(self) -> np.ndarray:
        return self.nodes[-1]

    def at(self, t) -> np.ndarray:
        return interpolate(self, t)


def integrate(model: SystemModel, xi: PiecewiseControl) -> DiscreteTrajectory:
    """Forward Euler on the partition of ``xi`` with left-endpoint control samples."""
    _check_dims(model, xi)
    p = xi.partition
    s, w = p.samples, p.widths
    K = p.n_intervals
    z = np.empty((K + 1, model.n))
    z[0] = model.x0
    x = model.x0
    for k in range(K):
        if w[k] > 0.0:
            rate = np.zeros(model.n)
            for i in np.flatnonzero(xi.d[k]):
                rate += xi.d[k, i] * model.f(s[k], x, xi.u[k], int(i))
            x = x + w[k] * rate
            if not np.all(np.abs(x) <= BLOWUP):
                raise NonFinite(f"state left the finite range at node {k + 1} (t={s[k + 1]:.6g})")
        z[k + 1] = x
    return DiscreteTrajectory(p, z)


def cost(model: SystemModel, traj: DiscreteTrajectory) -> float:
    return float(model.terminal_cost(traj.final))


def constraint_eval(model: SystemModel, traj: DiscreteTrajectory):
    """Return ``(psi_max, values, argmax)`` with values shaped (J, K+1).

    ``psi_max`` is the ``Unconstrained`` marker and ``argmax`` is None when the
    model has no constraints. Ties resolve to the least ``(j, k)``.
    """
    J = model.n_constraints
    if J == 0:
        return Unconstrained, np.zeros((0, traj.nodes.shape[0])), None
    values = np.array([[c.h(x) for x in traj.nodes] for c in model.constraints], dtype=float)
    flat = int(np.argmax(values))  # first occurrence in row-major order is lexicographic
    j, k = divmod(flat, values.shape[1])
    return float(values[j, k]), values, (j, k)


def interpolate(traj: DiscreteTrajectory, t: float) -> np.ndarray:
    """Linear interpolation between bracketing nodes."""
    if not (0.0 <= t <= 1.0):
        raise OutOfRange(f"t={t!r} outside [0, 1]")
    s = traj.partition.samples
    k = int(np.searchsorted(s, t, side="right")) - 1
    if k >= s.size - 1:
        return traj.nodes[-1].copy()
    a, b = s[k], s[k + 1]
    if b == a:
        return traj.nodes[k].copy()
    lam = (t - a) / (b - a)
    return (1.0 - lam) * traj.nodes[k] + lam * traj.nodes[k + 1]


@dataclass(frozen=True, eq=False)
class TransitionStack:
    """Per-interval linearization of the Euler map.

    ``factors[k] = I + dt_k * sum_i d_ki df_i/dx``; the input maps give the
    first-order response of node ``k+1`` to perturbations on interval ``k``:
    ``gu[k] = dt_k * sum_i d_ki df_i/du`` and ``gd[k][:, i] = dt_k * f_i``.
    """

    partition: Partition
    factors: np.ndarray
    gu: np.ndarray
    gd: np.ndarray

    def phi(self, k: int, j: int) -> np.ndarray:
        """Transition matrix from node ``j`` to node ``k >= j``."""
        n = self.factors.shape[1]
        out = np.eye(n)
        for l in range(j, k):
            out = self.factors[l] @ out
        return out


def transition_stack(model: SystemModel, xi: PiecewiseControl, traj: DiscreteTrajectory) -> TransitionStack:
    p = xi.partition
    s, w = p.samples, p.widths
    K, n, m, q = p.n_intervals, model.n, model.m, model.q
    factors = np.tile(np.eye(n), (K, 1, 1))
    gu = np.zeros((K, n, m))
    gd = np.zeros((K, n, q))
    for k in range(K):
        if w[k] == 0.0:
            continue
        x, u = traj.nodes[k], xi.u[k]
        for i in range(q):
            gd[k, :, i] = w[k] * model.f(s[k], x, u, i)
            dk = xi.d[k, i]
            if dk != 0.0:
                factors[k] += (w[k] * dk) * model.fx(s[k], x, u, i)
                if m:
                    gu[k] += (w[k] * dk) * model.fu(s[k], x, u, i)
    return TransitionStack(p, factors, gu, gd)


def directional_derivative_flow(model: SystemModel, xi: PiecewiseControl, traj: DiscreteTrajectory,
                                stack: TransitionStack, direction: ControlDirection, k: int) -> np.ndarray:
    """Directional derivative of node ``k`` along ``direction``.

    Evaluated as the explicit sum over earlier intervals of transition matrices
    applied to the per-interval input response.
    """
    out = np.zeros(model.n)
    for j in range(k):
        drive = stack.gu[j] @ direction.u[j] + stack.gd[j] @ direction.d[j]
        out += stack.phi(k, j + 1) @ drive
    return out


def linearized_flow(stack: TransitionStack, direction: ControlDirection) -> np.ndarray:
    """All node derivatives at once via the forward linear recursion, shape (K+1, n)."""
    K, n = stack.factors.shape[0], stack.factors.shape[1]
    v = np.zeros((K + 1, n))
    for j in range(K):
        v[j + 1] = stack.factors[j] @ v[j] + stack.gu[j] @ direction.u[j] + stack.gd[j] @ direction.d[j]
    return v


@dataclass(frozen=True, eq=False)
class FunctionalGradients:
    """Linear coefficients of the cost and every node constraint in the control.

    ``cost_u`` (K, m) and ``cost_d`` (K, q) give ``DJ``; ``con_u`` (J, K+1, K, m)
    and ``con_d`` (J, K+1, K, q) give ``Dpsi_{j,k}``, which vanish for intervals
    ``l >= k``.
    """

    J_value: float
    cost_u: np.ndarray
    cost_d: np.ndarray
    con_u: np.ndarray
    con_d: np.ndarray
    psi_values: np.ndarray
    psi_max: object
    psi_argmax: tuple | None

    def apply(self, direction: ControlDirection) -> tuple[float, np.ndarray]:
        """``(DJ, Dpsi)`` for a direction, Dpsi shaped (J, K+1)."""
        dj = float(np.sum(self.cost_u * direction.u) + np.sum(self.cost_d * direction.d))
        dpsi = (np.einsum("jklm,lm->jk", self.con_u, direction.u)
                + np.einsum("jklq,lq->jk", self.con_d, direction.d))
        return dj, dpsi


def functional_gradients(model: SystemModel, xi: PiecewiseControl, traj: DiscreteTrajectory,
                         stack: TransitionStack) -> FunctionalGradients:
    """Backward adjoint sweeps for the cost and for all node constraints at once."""
    K, n, m, q = xi.n_intervals, model.n, model.m, model.q
    lam = np.asarray(model.terminal_cost_grad(traj.final), dtype=float).reshape(n)
    cost_u = np.zeros((K, m))
    cost_d = np.zeros((K, q))
    for l in range(K - 1, -1, -1):
        cost_u[l] = lam @ stack.gu[l]
        cost_d[l] = lam @ stack.gd[l]
        lam = lam @ stack.factors[l]

    psi_max, psi_values, argmax = constraint_eval(model, traj)
    Jn = model.n_constraints
    con_u = np.zeros((Jn, K + 1, K, m))
    con_d = np.zeros((Jn, K + 1, K, q))
    if Jn:
        A = np.array([[np.asarray(c.grad(x), dtype=float).reshape(n) for x in traj.nodes]
                      for c in model.constraints])
        for l in range(K - 1, -1, -1):
            sub = A[:, l + 1:, :]
            con_u[:, l + 1:, l, :] = sub @ stack.gu[l]
            con_d[:, l + 1:, l, :] = sub @ stack.gd[l]
            A[:, l + 1:, :] = sub @ stack.factors[l]
    return FunctionalGradients(cost(model, traj), cost_u, cost_d, con_u, con_d,
                               psi_values, psi_max, argmax)


@dataclass(frozen=True, eq=False)
class Evaluation:
    """A control together with its trajectory, cost and constraint value."""

    xi: PiecewiseControl
    traj: DiscreteTrajectory
    J: float
    psi: object

    @property
    def psi_num(self) -> float:
        return psi_number(self.psi)


def evaluate(model: SystemModel, xi: PiecewiseControl) -> Evaluation:
    traj = integrate(model, xi)
    psi, _, _ = constraint_eval(model, traj)
    return Evaluation(xi, traj, cost(model, traj), psi)


def _check_dims(model: SystemModel, xi: PiecewiseControl) -> None:
    if xi.m != model.m or xi.q != model.q:
        raise InvalidControl(f"control has m={xi.m}, q={xi.q}; model expects m={model.m}, q={model.q}")
