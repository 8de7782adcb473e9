"""Outer loop: optimality test, step, modulation and mesh refinement."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .core import AlgoParams, Partition, PiecewiseControl, refine_onto, union
from .errors import InvalidControl, SolverStall, StepCapExceeded
from .optimality import build_subproblem, solve_theta
from .relax_project import induced_partition
from .search import Infinite, armijo_step, frequency_search
from .simulate import (SystemModel, Unconstrained, evaluate, functional_gradients,
                       transition_stack)

log = logging.getLogger(__name__)

STEP = "Step"
REFINE_THETA = "RefineThetaSmall"
REFINE_NU = "RefineNuInfeasible"
STOP = "Stop"

THETA_STOP = "ThetaStop"
ITER_CAP = "IterCap"
STEP_CAP = "StepCap"

FEASIBILITY_SLACK = 1e-8
# dense subproblem rows are (rows, intervals, m + q); the solver holds about
# four copies, so this caps the peak near 2 GB
MAX_ROW_ENTRIES = 2 ** 26


def row_entries(model: SystemModel, xi: PiecewiseControl) -> int:
    """Size of the dense affine-row block the optimality subproblem would need."""
    K = xi.n_intervals
    rows = 1 + len(model.constraints) * (K + 1)
    return rows * K * (model.m + model.q)


@dataclass(frozen=True)
class IterationRecord:
    j: int
    N_j: int
    tau_size: int
    theta_tau: float
    J_tau: float
    Psi_tau: float | None
    action: str
    mu: int | None = None
    nu: int | None = None
    wall_time: float = 0.0
    branch: str = ""
    solver_iters: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TraceEntry:
    """What is needed to re-verify one accepted step from scratch."""

    j: int
    xi: PiecewiseControl
    direction: PiecewiseControl
    theta: float
    branch: str
    mu: int
    nu: int


@dataclass(frozen=True, eq=False)
class RunResult:
    final_control: PiecewiseControl
    final_partition: Partition
    history: list
    termination: str
    final_J: float
    final_Psi: object
    final_N: int
    trace: list = field(default_factory=list)

    @property
    def final_theta(self) -> float:
        return self.history[-1].theta_tau


def _refined(xi: PiecewiseControl, N: int) -> PiecewiseControl:
    """``xi`` resampled onto its partition joined with the induced partition at level ``N``."""
    part = union(xi.partition, induced_partition(xi, N), level=N)
    return refine_onto(xi, part)


def run(model: SystemModel, params: AlgoParams, init: PiecewiseControl,
        iter_cap: int | None = None, sink: Callable[[IterationRecord], None] | None = None,
        keep_trace: bool = False, max_row_entries: int = MAX_ROW_ENTRIES) -> RunResult:
    """Iterate descent, modulation and refinement from a pure initial control.

    The run ends with ``IterCap`` when the iteration cap, the level cap or the
    subproblem memory budget ``max_row_entries`` is exceeded.
    """
    if not init.pure:
        raise InvalidControl("the initial control must be pure")
    if init.partition.level < params.N0:
        if init.partition.mesh > 2.0 ** -params.N0:
            raise InvalidControl(f"initial partition mesh exceeds 2^-{params.N0}")
        init = PiecewiseControl(init.partition.with_level(params.N0), init.u, init.d, True)
    iter_cap = params.iter_cap if iter_cap is None else iter_cap
    if row_entries(model, init) > max_row_entries:
        raise InvalidControl(f"initial partition with {init.n_intervals} intervals exceeds the "
                             "subproblem memory budget")

    xi = init
    N = params.N0
    history: list[IterationRecord] = []
    trace: list[TraceEntry] = []
    termination = ITER_CAP
    ev = evaluate(model, xi)

    for j in range(iter_cap):
        t_start = time.perf_counter()
        if row_entries(model, xi) > max_row_entries:
            log.warning("iteration %d: %d intervals exceed the subproblem memory budget; stopping",
                        j, xi.n_intervals)
            termination = ITER_CAP
            break
        stack = transition_stack(model, xi, ev.traj)
        grads = functional_gradients(model, xi, ev.traj, stack)
        sp = build_subproblem(model, xi, grads, params.gamma)
        try:
            report = solve_theta(sp, params.subproblem_tol)
            theta, iters = report.theta, report.solver_iters
        except SolverStall as exc:
            log.warning("iteration %d: %s; treating theta as 0", j, exc)
            report, theta, iters = None, 0.0, exc.iters
        psi = None if ev.psi is Unconstrained else float(ev.psi)

        def record(action, mu=None, nu=None):
            rec = IterationRecord(j, N, xi.partition.samples.size, float(theta), float(ev.J), psi,
                                  action, mu, nu, time.perf_counter() - t_start, sp.branch, iters)
            history.append(rec)
            log.info("j=%d N=%d |tau|=%d theta=%.4g J=%.6g Psi=%s %s mu=%s nu=%s",
                     j, N, rec.tau_size, theta, ev.J, psi, action, mu, nu)
            if sink is not None:
                sink(rec)

        if theta >= params.theta_stop:
            record(STOP)
            termination = THETA_STOP
            break

        if theta > -params.Lambda * 2.0 ** (-params.chi * N):
            if N + 1 > params.N_cap:
                record(REFINE_THETA)
                termination = ITER_CAP
                break
            record(REFINE_THETA)
            N += 1
            xi = _refined(xi, N)
            ev = evaluate(model, xi)
            continue

        try:
            mu = armijo_step(model, xi, report, params, base=ev)
        except StepCapExceeded as exc:
            log.warning("iteration %d: %s", j, exc)
            record(STEP, mu=None)
            termination = STEP_CAP
            break
        freq = frequency_search(model, xi, report, mu, N + params.eta, params, base=ev)
        if freq.nu is Infinite:
            record(REFINE_NU, mu=mu.mu)
            if N + 1 > params.N_cap:
                termination = ITER_CAP
                break
            N += 1
            xi = _refined(xi, N)
            ev = evaluate(model, xi)
            continue

        record(STEP, mu=mu.mu, nu=freq.nu)
        if keep_trace:
            trace.append(TraceEntry(j, xi, report.direction, theta, report.branch, mu.mu, freq.nu))
        N = max(N, freq.nu)
        xi = freq.projected
        if xi.partition.mesh > 2.0 ** -N:
            xi = _refined(xi, N)
        else:
            xi = PiecewiseControl(xi.partition.with_level(N), xi.u, xi.d, True)
        ev = evaluate(model, xi)

    return RunResult(xi, xi.partition, history, termination, ev.J, ev.psi, N, trace)


def feasibility_monitor(history) -> bool:
    """True iff once a record is feasible every later record stays within the slack."""
    seen = False
    for rec in history:
        psi = rec.Psi_tau if isinstance(rec, IterationRecord) else rec
        if psi is None:
            continue
        if seen and psi > FEASIBILITY_SLACK:
            return False
        if psi <= 0.0:
            seen = True
    return True
