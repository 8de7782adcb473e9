"""Backtracking searches for the step size and the modulation frequency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AlgoParams, PiecewiseControl, step
from .errors import NonFinite, PreconditionViolation, StepCapExceeded
from .optimality import FEASIBLE, OptimalityReport
from .relax_project import rho
from .simulate import Evaluation, SystemModel, evaluate, psi_number


class _Infinite:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Infinite"

    def __reduce__(self):
        return (_Infinite, ())


Infinite = _Infinite()


@dataclass(frozen=True, eq=False)
class StepOutcome:
    mu: int
    candidate: PiecewiseControl
    J_candidate: float
    Psi_candidate: object
    probes: int = 0


@dataclass(frozen=True, eq=False)
class FrequencyOutcome:
    nu: object
    projected: PiecewiseControl | None
    new_partition: object
    J_proj: float = float("nan")
    Psi_proj: object = None
    probes: int = 0


def step_accepts(branch: str, J0: float, psi0: float, J1: float, psi1: float,
                 bound: float) -> bool:
    """Sufficient-decrease test shared by both searches; ``bound`` is negative."""
    if branch == FEASIBLE:
        return J1 - J0 <= bound and psi1 <= bound
    return psi1 - psi0 <= bound


def step_margins(branch: str, J0: float, psi0: float, J1: float, psi1: float,
                 bound: float) -> list[float]:
    """Slack of each inequality (nonnegative means satisfied)."""
    if branch == FEASIBLE:
        return [bound - (J1 - J0), bound - psi1]
    return [bound - (psi1 - psi0)]


def _try(model: SystemModel, xi: PiecewiseControl) -> Evaluation | None:
    try:
        return evaluate(model, xi)
    except NonFinite:
        return None


def armijo_step(model: SystemModel, xi: PiecewiseControl, report: OptimalityReport,
                params: AlgoParams, base: Evaluation | None = None) -> StepOutcome:
    """Least ``k`` whose step ``beta**k`` toward the direction gives sufficient decrease."""
    theta = report.theta
    if not theta < 0.0:
        raise PreconditionViolation(f"step search needs theta < 0, got {theta!r}")
    base = evaluate(model, xi) if base is None else base
    J0, psi0 = base.J, base.psi_num
    g = report.direction
    for k in range(params.mu_cap + 1):
        lam = params.beta ** k
        cand = step(xi, g, lam)
        ev = _try(model, cand)
        if ev is None:
            continue
        if step_accepts(report.branch, J0, psi0, ev.J, ev.psi_num, params.alpha * lam * theta):
            return StepOutcome(k, cand, ev.J, ev.psi, probes=k + 1)
    raise StepCapExceeded(f"no sufficient decrease within {params.mu_cap} halvings (theta={theta:.3g})")


def frequency_gate(params: AlgoParams, mu: int, k: int) -> bool:
    return params.alpha_bar * params.beta_bar ** k <= (1.0 - params.omega) * params.alpha * params.beta ** mu


def frequency_search(model: SystemModel, xi: PiecewiseControl, report: OptimalityReport,
                     mu: StepOutcome, k_max: int, params: AlgoParams,
                     base: Evaluation | None = None) -> FrequencyOutcome:
    """Least modulation level ``k <= k_max`` whose projection keeps enough decrease.

    Levels failing the frequency gate are skipped without projecting.
    """
    base = evaluate(model, xi) if base is None else base
    J0, psi0 = base.J, base.psi_num
    theta = report.theta
    probes = 0
    for k in range(k_max + 1):
        if not frequency_gate(params, mu.mu, k):
            continue
        probes += 1
        projected, part = rho(mu.candidate, model.input_box, k)
        ev = _try(model, projected)
        if ev is None:
            continue
        bound = (params.alpha * params.beta ** mu.mu - params.alpha_bar * params.beta_bar ** k) * theta
        if step_accepts(report.branch, J0, psi0, ev.J, ev.psi_num, bound):
            return FrequencyOutcome(k, projected, part, ev.J, ev.psi, probes)
    return FrequencyOutcome(Infinite, None, None, probes=probes)


def recheck_step(model: SystemModel, xi: PiecewiseControl, direction: PiecewiseControl,
                 theta: float, branch: str, mu: int, params: AlgoParams) -> list[float]:
    """Margins of the accepted step inequalities from fresh integrations."""
    base = evaluate(model, xi)
    lam = params.beta ** mu
    ev = evaluate(model, step(xi, direction, lam))
    return step_margins(branch, base.J, base.psi_num, ev.J, ev.psi_num, params.alpha * lam * theta)


def recheck_frequency(model: SystemModel, xi: PiecewiseControl, direction: PiecewiseControl,
                      theta: float, branch: str, mu: int, nu: int, params: AlgoParams) -> list[float]:
    """Margins of the accepted frequency inequalities (gate first) from fresh integrations."""
    base = evaluate(model, xi)
    cand = step(xi, direction, params.beta ** mu)
    projected, _ = rho(cand, model.input_box, nu)
    ev = evaluate(model, projected)
    gate = (1.0 - params.omega) * params.alpha * params.beta ** mu - params.alpha_bar * params.beta_bar ** nu
    bound = (params.alpha * params.beta ** mu - params.alpha_bar * params.beta_bar ** nu) * theta
    return [gate] + step_margins(branch, base.J, base.psi_num, ev.J, ev.psi_num, bound)
