"""End-to-end acceptance criteria.

Each test prints one line in the "acceptance criteria" summary section. The
benchmark runs are shared across criteria through session fixtures.
Criteria marked ``xfail(strict=True)`` are measured faithfully and are known
not to be met by the solver as built; an unexpected pass fails the suite.
"""

import time

import numpy as np
import pytest

from swopt import benchmarks, checks
from swopt.core import Partition, PiecewiseControl, refine_onto, union
from swopt.driver import feasibility_monitor, run
from swopt.optimality import solve_theta
from swopt.relax_project import rho
from swopt.search import recheck_frequency, recheck_step
from swopt.simulate import integrate

pytestmark = pytest.mark.slow

RUNS: dict = {}

UNSQUARED_NORM = ("with the exact un-squared norm in the optimality function, theta is zero wherever "
                  "no feasible direction has a cost slope steeper than -1 per unit step, so descent "
                  "stops or modulation forces fine meshes before the published cost is reached")


def benchmark_run(name):
    if name not in RUNS:
        model, spec = benchmarks.get(name)
        t0 = time.perf_counter()
        res = run(model, spec.params, spec.init, keep_trace=True)
        RUNS[name] = (model, spec, res, time.perf_counter() - t0)
    return RUNS[name]


def describe(res, wall):
    return f"{res.termination} after {len(res.history)} iterations, J={res.final_J:.6g}, {wall:.1f}s"


# ---------------------------------------------------------------- benchmark costs

@pytest.mark.xfail(strict=True, reason=UNSQUARED_NORM)
def test_c01_lqr_cost(acceptance):
    model, spec, res, wall = benchmark_run("lqr")
    ok = res.final_J <= 1.89e-3 and 0.6e-3 <= res.final_J <= 2.5e-3 and wall <= 120.0
    assert acceptance(1, "LQR cost in [0.6e-3, 2.5e-3] and <= 1.89e-3 within 120 s", ok, describe(res, wall))


@pytest.mark.xfail(strict=True, reason=UNSQUARED_NORM)
def test_c02_tank_cost(acceptance):
    model, spec, res, wall = benchmark_run("tank")
    ok = abs(res.final_J - 4.829) <= 0.03 * 4.829 and wall <= 300.0
    assert acceptance(2, "tank cost within 3% of 4.829 within 300 s", ok, describe(res, wall))


@pytest.mark.xfail(strict=True, reason=UNSQUARED_NORM)
def test_c03_quadrotor_cost(acceptance):
    model, spec, res, wall = benchmark_run("quadrotor")
    psi = float(res.final_Psi)
    ok = (res.final_J <= 0.165 and abs(res.final_J - 0.128) <= 0.3 * 0.128 and psi <= 1e-8
          and wall <= 300.0)
    assert acceptance(3, "quadrotor cost <= 0.165, within 30% of 0.128, Psi <= 1e-8, within 300 s", ok,
                      f"{describe(res, wall)}, Psi={psi:.3g}")


@pytest.mark.xfail(strict=True, reason=UNSQUARED_NORM)
def test_c04_needle_cost(acceptance):
    model, spec, res, wall = benchmark_run("needle")
    nodes = integrate(model, res.final_control).nodes
    worst = max(c.h(x) for c in model.constraints for x in nodes)
    ok = abs(res.final_J - 0.302) <= 0.3 * 0.302 and worst <= 1e-8 and wall <= 600.0
    assert acceptance(4, "needle cost within 30% of 0.302, spheres <= 1e-8 at every node, within 600 s",
                      ok, f"{describe(res, wall)}, max sphere value {worst:.3g}")


# ---------------------------------------------------------------- projection properties

def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def test_c05_wavelet_bound(acceptance):
    rng = np.random.default_rng(5)
    (results, wall) = _timed(lambda: checks.wavelet_bound(rng, signals=100, levels=range(9)))
    worst = next(r.margin for r in results if r.name == "wavelet_bound")
    ok = worst >= -1e-12 and wall <= 10.0
    assert acceptance(5, "wavelet bound on 100 signals, N=0..8", ok, f"min slack {worst:.3g}, {wall:.2f}s")


def test_c06_pwm_validity(acceptance):
    rng = np.random.default_rng(6)
    (results, wall) = _timed(lambda: checks.pwm_validity(rng, controls=100, levels=range(7)))
    failures = [r.name for r in results if not r.passed]
    ok = not failures and wall <= 10.0
    assert acceptance(6, "PWM validity on 100 controls, N=0..6", ok,
                      f"{len(results)} conditions, failing: {failures or 'none'}, {wall:.2f}s")


def test_c07_euler_rate(acceptance):
    ((_, errs), wall) = _timed(lambda: checks.euler_errors(levels=range(4, 10)))
    ratios = [b / a for a, b in zip(errs, errs[1:])]
    ok = all(0.4 <= r <= 0.6 for r in ratios) and wall <= 30.0
    assert acceptance(7, "Euler halving ratios in [0.4, 0.6] on LQR, N=4..8", ok,
                      "ratios " + ", ".join(f"{r:.3f}" for r in ratios) + f", {wall:.2f}s")


def projection_errors(levels, fine_level=14, seed=2024):
    """Max state gap on a fine grid between a relaxed LQR control and its projections."""
    model, _ = benchmarks.get("lqr")
    rng = np.random.default_rng(seed)
    xi = PiecewiseControl(Partition.uniform(4), rng.uniform(-2, 2, size=(16, 1)),
                          rng.dirichlet(np.ones(3), size=16))
    grid = Partition.uniform(fine_level)
    ref = integrate(model, refine_onto(xi, grid)).nodes[:, :3]
    errs = {}
    for N in levels:
        pure, part = rho(xi, model.input_box, N)
        fine = union(part, grid, level=fine_level)
        traj = integrate(model, refine_onto(pure, fine))
        # union may carry duplicates; the last copy of each grid time is the node reached there
        idx = np.searchsorted(fine.samples, grid.samples, side="right") - 1
        errs[N] = float(np.max(np.linalg.norm(traj.nodes[idx, :3] - ref, axis=1)))
    return errs


def test_c08_projection_rate(acceptance):
    (errs, wall) = _timed(lambda: projection_errors([2, 4, 6, 8]))
    ratios = [errs[N + 2] / errs[N] for N in (2, 4, 6)]
    mean = float(np.mean(ratios))
    ok = mean <= 0.75 and wall <= 60.0
    assert acceptance(8, "trajectory projection error ratio over two levels <= 0.75", ok,
                      f"mean ratio {mean:.3f} ({', '.join(f'{r:.3f}' for r in ratios)}), {wall:.2f}s")


# ---------------------------------------------------------------- sensitivities and optimality

def test_c09_sensitivity(acceptance):
    (results, wall) = _timed(lambda: checks.check_sensitivity(seed=9, directions=20, lam=1e-5))
    worst = min(r.margin for r in results)
    ok = all(r.passed for r in results) and wall <= 60.0
    assert acceptance(9, "sensitivities match central differences to 1e-4", ok,
                      f"{len(results)} checks, min margin {worst:.3g}, {wall:.2f}s")


def test_c10_theta_grid(acceptance):
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    gaps = []
    for _ in range(25):
        sp = checks.tiny_instance(rng)
        gaps.append(abs(solve_theta(sp).theta - checks.grid_theta(sp, 1e-3)))
    wall = time.perf_counter() - t0
    ok = max(gaps) <= 2e-3 and wall <= 120.0
    assert acceptance(10, "theta matches a 1e-3 grid search within 2e-3 on 25 instances", ok,
                      f"max gap {max(gaps):.3g}, {wall:.2f}s")


# ---------------------------------------------------------------- run-level properties

ALL = ["lqr", "tank", "quadrotor", "needle"]


def test_c11_line_search_recheck(acceptance):
    worst, count = np.inf, 0
    for name in ALL:
        model, spec, res, _ = benchmark_run(name)
        for t in res.trace:
            m1 = recheck_step(model, t.xi, t.direction, t.theta, t.branch, t.mu, spec.params)
            m2 = recheck_frequency(model, t.xi, t.direction, t.theta, t.branch, t.mu, t.nu, spec.params)
            worst = min(worst, *m1, *m2)
            count += 1
    ok = count > 0 and worst >= -1e-10
    assert acceptance(11, "accepted mu and nu re-verify from fresh integrations", ok,
                      f"{count} accepted steps, min margin {worst:.3g}")


def test_c12_feasibility_retention(acceptance):
    flags = {name: feasibility_monitor(benchmark_run(name)[2].history) for name in ("quadrotor", "needle")}
    assert acceptance(12, "feasibility retained on quadrotor and needle", all(flags.values()),
                      ", ".join(f"{k}={v}" for k, v in flags.items()))


@pytest.mark.xfail(strict=True, reason=UNSQUARED_NORM)
def test_c13_theta_trend(acceptance):
    parts, ok = [], True
    for name in ALL:
        model, spec, res, _ = benchmark_run(name)
        first, last = abs(res.history[0].theta_tau), abs(res.final_theta)
        good = last <= abs(spec.params.theta_stop) and last <= 0.25 * first
        ok &= good
        parts.append(f"{name} |theta| {first:.3g} -> {last:.3g}{'' if good else ' (miss)'}")
    assert acceptance(13, "|theta| at termination below the stop threshold and a quarter of its start",
                      ok, "; ".join(parts))
