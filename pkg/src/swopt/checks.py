"""Property suites behind ``swopt check``.

Every suite returns a list of :class:`CheckResult` carrying the measured
margin (non-negative means the property held). The suites use oracles that are
independent of the code path under test: exact breakpoint integration for the
wavelet bound, direct evaluation of the modulation layout, a matrix
exponential for the Euler rate, central differences for the sensitivities and
an exhaustive grid for the optimality function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

from . import benchmarks
from . import relax_project as rp
from .core import Partition, PiecewiseControl, refine_onto
from .optimality import FEASIBLE, INFEASIBLE, Subproblem, simplex_project, solve_theta
from .simulate import evaluate, functional_gradients, integrate, transition_stack


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    margin: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.suite}/{self.name}  margin={self.margin:.3e}{extra}"


# ---------------------------------------------------------------- random data


def random_partition(rng: np.random.Generator, max_breaks: int = 20) -> Partition:
    k = int(rng.integers(1, max_breaks + 1))
    inner = np.sort(rng.uniform(size=k - 1))
    return Partition.from_samples(np.concatenate([[0.0], inner, [1.0]]))


def random_step_signal(rng: np.random.Generator, max_breaks: int = 20):
    p = random_partition(rng, max_breaks)
    return p.samples, rng.uniform(-1.0, 1.0, size=p.n_intervals)


def random_relaxed(rng: np.random.Generator, q: int, m: int = 0, box=None,
                   max_breaks: int = 20) -> PiecewiseControl:
    p = random_partition(rng, max_breaks)
    d = rng.dirichlet(np.ones(q), size=p.n_intervals)
    if m:
        box = np.asarray(box, dtype=float).reshape(m, 2)
        u = rng.uniform(box[:, 0], box[:, 1], size=(p.n_intervals, m))
    else:
        u = np.zeros((p.n_intervals, 0))
    return PiecewiseControl(p, u, d, pure=False)


def _bv(values: np.ndarray) -> float:
    return float(np.abs(np.diff(values)).sum())


def l2_gap(samples: np.ndarray, values: np.ndarray, sig: rp.DyadicSignal) -> float:
    """Exact L2 distance between a step function and a dyadic signal."""
    grid = sig.samples
    cut = np.union1d(samples, grid)
    mid = 0.5 * (cut[:-1] + cut[1:])
    w = np.diff(cut)
    k = np.clip(np.searchsorted(samples, mid, side="right") - 1, 0, values.size - 1)
    diff = values[k] - sig.at(mid)
    return math.sqrt(float(np.dot(w, diff * diff)))


# ---------------------------------------------------------------- projection


def wavelet_bound(rng, signals: int = 100, levels=range(9)) -> list[CheckResult]:
    worst = math.inf
    ratios = []
    for _ in range(signals):
        s, v = random_step_signal(rng)
        bv = _bv(v)
        errs = []
        for N in levels:
            err = l2_gap(s, v, rp.haar_partial_sum(s, v, N))
            worst = min(worst, 0.5 * 2.0 ** (-N / 2.0) * bv - err)
            errs.append(err)
        errs = np.array(errs)
        ok = errs[:-1] > 1e-14
        if ok.any():
            ratios.append(float(np.mean(errs[1:][ok] / errs[:-1][ok])))
    mean_ratio = float(np.mean(ratios))
    limit = 1.0 / math.sqrt(2.0) + 0.1
    return [
        CheckResult("projection", "wavelet_bound", worst >= -1e-12, worst,
                    f"{signals} signals, N={levels.start}..{levels.stop - 1}"),
        CheckResult("projection", "wavelet_decay", mean_ratio <= limit, limit - mean_ratio,
                    f"mean consecutive ratio {mean_ratio:.4f}"),
    ]


def pwm_validity(rng, controls: int = 100, levels=range(7),
                  layout_probes: int = 64) -> list[CheckResult]:
    worst = {"entries_in_unit_interval": math.inf, "rows_sum_to_one": math.inf,
             "pure_entries": math.inf, "one_active": math.inf,
             "frame_allocation": math.inf, "layout": math.inf}
    for _ in range(controls):
        q = int(rng.integers(2, 5))
        xi = random_relaxed(rng, q)
        for N in levels:
            fd = rp.project_relaxed(xi, N)
            w = fd.values
            worst["entries_in_unit_interval"] = min(worst["entries_in_unit_interval"],
                                                    float(w.min()), float(1.0 - w.max()))
            worst["rows_sum_to_one"] = min(worst["rows_sum_to_one"],
                                           1e-9 - float(np.abs(w.sum(axis=1) - 1.0).max()))
            part, modes = rp.pwm(fd, N)
            is01 = np.all((modes == 0.0) | (modes == 1.0))
            worst["pure_entries"] = min(worst["pure_entries"], 0.0 if is01 else -1.0)
            one = np.all(modes.sum(axis=1) == 1.0)
            worst["one_active"] = min(worst["one_active"], 0.0 if one else -1.0)

            frames = 2 ** N
            left = fd.values[:: 2 ** (fd.level - N)][:frames]
            widths = part.widths.reshape(frames, q) if part.n_intervals == frames * q else None
            if widths is None:
                worst["frame_allocation"] = -1.0
                continue
            alloc_err = float(np.abs(widths * 2.0 ** N - left).max())
            worst["frame_allocation"] = min(worst["frame_allocation"], 1e-12 - alloc_err)

            # pointwise oracle: in frame k the active mode at t is the least i
            # with t < 2^-N (k + sum_{j<=i} w_j)
            t = rng.uniform(size=layout_probes)
            k = np.minimum(np.floor(t * frames).astype(int), frames - 1)
            bounds = (k[:, None] + np.cumsum(left[k], axis=1)) / frames
            expect = np.argmax(t[:, None] < bounds - 1e-12, axis=1)
            near = np.any(np.abs(t[:, None] - bounds) <= 1e-10, axis=1)
            got = np.argmax(modes[[part.locate(x) for x in t]], axis=1)
            bad = int(np.sum((expect != got) & ~near))
            worst["layout"] = min(worst["layout"], float(-bad))
    return [CheckResult("projection", f"pwm_{name}", margin >= 0.0, margin,
                        f"{controls} controls, N={levels.start}..{levels.stop - 1}")
            for name, margin in worst.items()]


def check_projection(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return wavelet_bound(rng) + pwm_validity(rng)


# ---------------------------------------------------------------- sensitivity


def _interior_point(rng, model, partition: Partition, margin: float = 0.05) -> PiecewiseControl:
    K, q, m = partition.n_intervals, model.q, model.m
    d = margin + (1.0 - q * margin) * rng.dirichlet(np.ones(q), size=K)
    if m:
        lo, hi = model.input_box[:, 0], model.input_box[:, 1]
        span = hi - lo
        u = rng.uniform(lo + margin * span, hi - margin * span, size=(K, m))
    else:
        u = np.zeros((K, 0))
    return PiecewiseControl(partition, u, d, pure=False)


def _shifted(xi: PiecewiseControl, du, dd, lam: float) -> PiecewiseControl:
    return PiecewiseControl(xi.partition, xi.u + lam * du, xi.d + lam * dd, pure=False)


def check_sensitivity(seed: int = 0, directions: int = 20, lam: float = 1e-5,
                      names=None) -> list[CheckResult]:
    """Adjoint gradients against central differences on every benchmark."""
    rng = np.random.default_rng(seed)
    out = []
    for name in names or benchmarks.REGISTRY:
        model, spec = benchmarks.get(name)
        part = Partition.uniform(min(spec.params.N0, 5))
        xi = _interior_point(rng, model, part)
        traj = integrate(model, xi)
        grads = functional_gradients(model, xi, traj, transition_stack(model, xi, traj))
        worst_j = worst_psi = 0.0
        for _ in range(directions):
            target = _interior_point(rng, model, part, margin=0.0)
            du, dd = target.u - xi.u, target.d - xi.d
            dj, dpsi = grads.apply(xi - target)
            dj, dpsi = -dj, -dpsi
            plus = evaluate(model, _shifted(xi, du, dd, lam))
            minus = evaluate(model, _shifted(xi, du, dd, -lam))
            fd_j = (plus.J - minus.J) / (2.0 * lam)
            worst_j = max(worst_j, abs(dj - fd_j) / max(abs(fd_j), abs(dj), 1e-12))
            if model.n_constraints:
                hp = np.array([[c.h(x) for x in plus.traj.nodes] for c in model.constraints])
                hm = np.array([[c.h(x) for x in minus.traj.nodes] for c in model.constraints])
                fd_psi = (hp - hm) / (2.0 * lam)
                # each constraint's errors are measured against its largest node
                # derivative, since early nodes carry derivatives at roundoff level
                scale = np.maximum(np.abs(fd_psi).max(axis=1, keepdims=True), 1e-300)
                rel = np.abs(dpsi - fd_psi) / scale
                worst_psi = max(worst_psi, float(rel.max()))
        out.append(CheckResult("sensitivity", f"{name}_cost", worst_j <= 1e-4, 1e-4 - worst_j,
                               f"max relative error {worst_j:.2e} over {directions} directions"))
        if model.n_constraints:
            out.append(CheckResult("sensitivity", f"{name}_constraints", worst_psi <= 1e-4,
                                   1e-4 - worst_psi, f"max relative error {worst_psi:.2e}"))
    return out


# ---------------------------------------------------------------- euler


def lqr_exact_final(model, xi: PiecewiseControl) -> np.ndarray:
    """Exact final state of the switched LQR under a step control via matrix exponentials."""
    n = model.n
    x = np.array(model.x0, dtype=float)
    s, w = xi.partition.samples, xi.partition.widths
    for k in range(xi.n_intervals):
        if w[k] == 0.0:
            continue
        u = xi.u[k]
        # the field is affine in x on each interval: f = A x + c
        A = sum(xi.d[k, i] * model.fx(s[k], x, u, i) for i in range(model.q))
        c = sum(xi.d[k, i] * model.f(s[k], np.zeros(n), u, i) for i in range(model.q))
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = A
        M[:n, n] = c
        x = (expm(w[k] * M) @ np.concatenate([x, [1.0]]))[:n]
    return x


def euler_errors(levels=range(4, 10), seed: int = 0) -> tuple[list[int], list[float]]:
    rng = np.random.default_rng(seed)
    model, _ = benchmarks.get("lqr")
    base = Partition.uniform(3)
    modes = np.eye(model.q)[rng.integers(0, model.q, size=base.n_intervals)]
    u = rng.uniform(-1.0, 1.0, size=(base.n_intervals, model.m))
    xi = PiecewiseControl(base, u, modes, pure=True)
    exact = lqr_exact_final(model, xi)
    errs = []
    for N in levels:
        fine = refine_onto(xi, Partition.uniform(N))
        errs.append(float(np.linalg.norm(integrate(model, fine).final - exact)))
    return list(levels), errs


def check_euler(seed: int = 0) -> list[CheckResult]:
    levels, errs = euler_errors(range(4, 10), seed)
    out = []
    for N, a, b in zip(levels, errs, errs[1:]):
        r = b / a
        margin = min(r - 0.4, 0.6 - r)
        out.append(CheckResult("euler", f"halving_ratio_N{N}", margin >= 0.0, margin,
                               f"err {a:.3e} -> {b:.3e}, ratio {r:.4f}"))
    return out


# ---------------------------------------------------------------- optimality


def tiny_instance(rng: np.random.Generator) -> Subproblem:
    """A random subproblem whose grid search is at most two dimensional."""
    K, m = [(1, 0), (1, 1), (2, 0)][int(rng.integers(0, 3))]
    q = 2
    p = random_partition(rng, K) if K > 1 else Partition.uniform(0)
    if p.n_intervals != K:
        p = Partition.from_samples([0.0, float(rng.uniform(0.2, 0.8)), 1.0])
    box = np.array([[-0.5, 0.5]] * m)
    u = rng.uniform(-0.5, 0.5, size=(K, m))
    d = np.eye(q)[rng.integers(0, q, size=K)]
    xi = PiecewiseControl(p, u, d, pure=True)
    n_con = int(rng.integers(0, 2))
    R = 1 + n_con * (K + 1)
    rows_u = rng.normal(scale=0.8, size=(R, K, m))
    rows_d = rng.normal(scale=0.8, size=(R, K, q))
    tags = ["cost"] + [(0, k) for k in range(R - 1)]
    if n_con:
        rows_u[1:2] = 0.0  # node 0 does not depend on the control
        rows_d[1:2] = 0.0
    psi = float(rng.uniform(-0.5, 0.5)) if n_con else -math.inf
    gamma = 1.0
    if psi <= 0.0:
        branch = FEASIBLE
        offsets = np.concatenate([[0.0], np.full(R - 1, gamma * psi)])
    else:
        branch = INFEASIBLE
        offsets = np.concatenate([[-psi], np.zeros(R - 1)])
    return Subproblem(xi, rows_u, rows_d, offsets, tags, branch, gamma, box, psi)


def grid_theta(sp: Subproblem, h: float = 1e-3) -> float:
    """Exhaustive search over a grid of spacing ``h`` in every free coordinate."""
    xi = sp.base
    K, m = xi.n_intervals, xi.m
    w = xi.partition.widths
    axes = []
    for k in range(K):
        for j in range(m):
            lo, hi = sp.box[j]
            axes.append(("u", k, j, np.linspace(lo, hi, int(round((hi - lo) / h)) + 1)))
        axes.append(("d", k, 0, np.linspace(0.0, 1.0, int(round(1.0 / h)) + 1)))
    mesh = np.meshgrid(*[a[3] for a in axes], indexing="ij")
    shape = mesh[0].shape
    du = np.zeros(shape + (K, m))
    dd = np.zeros(shape + (K, 2))
    for (kind, k, j, _), vals in zip(axes, mesh):
        if kind == "u":
            du[..., k, j] = vals - xi.u[k, j]
        else:
            dd[..., k, 0] = vals - xi.d[k, 0]
            dd[..., k, 1] = (1.0 - vals) - xi.d[k, 1]
    rows = (np.einsum("rkm,...km->...r", sp.rows_u, du)
            + np.einsum("rkq,...kq->...r", sp.rows_d, dd) + sp.offsets)
    norm_u = np.sqrt(np.einsum("k,...k->...", w, np.sum(du * du, axis=-1)))
    norm_d = np.sqrt(np.einsum("k,...k->...", w, np.sum(dd * dd, axis=-1)))
    return float((rows.max(axis=-1) + norm_u + norm_d).min())


def check_optimality(seed: int = 0, instances: int = 25) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    worst_sign = -math.inf
    for _ in range(instances):
        sp = tiny_instance(rng)
        theta = solve_theta(sp).theta
        worst_gap = max(worst_gap, abs(theta - grid_theta(sp)))
        worst_sign = max(worst_sign, theta)
    proj_err = 0.0
    for _ in range(200):
        v = rng.normal(scale=2.0, size=int(rng.integers(1, 8)))
        proj_err = max(proj_err, float(np.abs(simplex_project(v) - sort_simplex_projection(v)).max()))
    return [
        CheckResult("optimality", "grid_equivalence", worst_gap <= 2e-3, 2e-3 - worst_gap,
                    f"{instances} instances, max |theta - grid| {worst_gap:.2e}"),
        CheckResult("optimality", "non_positive", worst_sign <= 1e-9, 1e-9 - worst_sign,
                    f"max theta {worst_sign:.2e}"),
        CheckResult("optimality", "simplex_projection", proj_err <= 1e-12, 1e-12 - proj_err,
                    "against the sort-based projection"),
    ]


def sort_simplex_projection(v) -> np.ndarray:
    """Projection onto the probability simplex by sorting (Held, Wolfe and Crowder)."""
    v = np.asarray(v, dtype=float)
    s = np.sort(v)[::-1]
    css = np.cumsum(s) - 1.0
    idx = np.arange(1, v.size + 1)
    r = idx[s - css / idx > 0][-1]
    return np.maximum(v - css[r - 1] / r, 0.0)


SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "projection": check_projection,
    "sensitivity": check_sensitivity,
    "euler": check_euler,
    "optimality": check_optimality,
}


def run_suite(name: str) -> list[CheckResult]:
    if name == "all":
        return [r for suite in SUITES.values() for r in suite()]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    return SUITES[name]()
