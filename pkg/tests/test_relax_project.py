import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swopt.core import Partition, PiecewiseControl
from swopt.errors import InvalidControl
from swopt.relax_project import (DyadicSignal, cell_averages, haar_coefficients, haar_partial_sum,
                                 induced_partition, project_relaxed, pwm, rho)


def step_signal(rng, K, dim=None):
    inner = np.sort(rng.uniform(size=K - 1))
    samples = np.concatenate([[0.0], inner, [1.0]])
    shape = (K,) if dim is None else (K, dim)
    return samples, rng.normal(size=shape)


def relaxed(rng, K, q, m=0, box=None):
    samples, _ = step_signal(rng, K)
    part = Partition.from_samples(samples)
    d = rng.dirichlet(np.ones(q) * 0.5, size=K)
    u = rng.uniform(box[:, 0], box[:, 1], size=(K, m)) if m else np.zeros((K, 0))
    return PiecewiseControl(part, u, d)


def l2_exact(samples, values, sig: DyadicSignal):
    """Exact L2 distance between a step function and a dyadic signal."""
    grid = np.union1d(samples, sig.samples)
    mids = 0.5 * (grid[:-1] + grid[1:])
    k = np.clip(np.searchsorted(samples, mids, side="right") - 1, 0, len(values) - 1)
    diff = np.asarray(values)[k] - sig.at(mids)
    return float(np.sqrt(np.sum(np.diff(grid) * diff ** 2)))


# ---------------------------------------------------------------- Haar partial sums

@pytest.mark.parametrize("N", [0, 1, 4])
def test_constant_signal_is_fixed(N):
    sig = haar_partial_sum([0.0, 0.3, 1.0], [2.5, 2.5], N)
    assert sig.level == N + 1
    assert np.allclose(sig.values, 2.5, atol=1e-15)


@pytest.mark.parametrize("N", [0, 2, 5])
def test_first_wavelet_reproduced(N):
    sig = haar_partial_sum([0.0, 0.5, 1.0], [1.0, -1.0], N)
    half = 2 ** N
    assert np.array_equal(sig.values, np.r_[np.ones(half), -np.ones(half)])


def test_level_zero_is_mean_plus_first_wavelet():
    # f = 1 on [0, 0.25), 0 elsewhere: mean 0.25, <f, b00> = 0.25
    sig = haar_partial_sum([0.0, 0.25, 1.0], [1.0, 0.0], 0)
    assert np.allclose(sig.values, [0.5, 0.0], atol=1e-15)


def test_partial_sum_equals_cell_average():
    rng = np.random.default_rng(5)
    s, v = step_signal(rng, 13)
    for N in range(6):
        assert np.allclose(haar_partial_sum(s, v, N).values, cell_averages(s, v, N + 1), atol=1e-12)


def test_haar_coefficient_oracle():
    # midpoint quadrature on a fine grid that contains every breakpoint
    samples = np.array([0.0, 3 / 16, 5 / 8, 1.0])
    values = np.array([1.0, -2.0, 0.5])
    mean, coefs = haar_coefficients(samples, values, 2)
    fine = (np.arange(256) + 0.5) / 256
    f = values[np.searchsorted(samples, fine, side="right") - 1]
    assert mean[0] == pytest.approx(f.mean(), abs=1e-15)
    for k, ck in enumerate(coefs):
        for j in range(2 ** k):
            x = 2 ** k * fine - j
            b = np.where((x >= 0) & (x < 0.5), 1.0, 0.0) - np.where((x >= 0.5) & (x < 1), 1.0, 0.0)
            assert ck[j, 0] == pytest.approx(np.mean(f * b), abs=1e-14)


def test_negative_level_rejected():
    with pytest.raises(InvalidControl):
        haar_partial_sum([0.0, 1.0], [1.0], -1)


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 8))
def test_wavelet_error_bound(seed, N):
    rng = np.random.default_rng(seed)
    s, v = step_signal(rng, int(rng.integers(1, 40)))
    sig = haar_partial_sum(s, v, N)
    bv = float(np.sum(np.abs(np.diff(v))))
    assert l2_exact(s, v, sig) <= 0.5 * 2 ** (-N / 2) * bv + 1e-12


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 6), st.floats(-3, 3))
def test_partial_sum_linear(seed, N, a):
    rng = np.random.default_rng(seed)
    s = np.concatenate([[0.0], np.sort(rng.uniform(size=9)), [1.0]])
    f, g = rng.normal(size=10), rng.normal(size=10)
    lhs = haar_partial_sum(s, a * f + g, N).values
    rhs = a * haar_partial_sum(s, f, N).values + haar_partial_sum(s, g, N).values
    assert np.allclose(lhs, rhs, atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 6))
def test_partial_sum_idempotent(seed, N):
    rng = np.random.default_rng(seed)
    s, v = step_signal(rng, 17)
    once = haar_partial_sum(s, v, N)
    twice = haar_partial_sum(once.samples, once.values, N)
    assert np.allclose(once.values, twice.values, atol=1e-12)


# ---------------------------------------------------------------- relaxed projection

def test_project_constant_weights():
    xi = PiecewiseControl.constant(Partition.from_samples([0, 0.3, 1]), np.zeros(0), [0.2, 0.8])
    d = project_relaxed(xi, 3).values
    assert np.allclose(d, [0.2, 0.8], atol=1e-15)


def test_project_alternating_modes():
    N = 2
    K = 2 ** (N + 2)
    d = np.tile(np.eye(2), (K // 2, 1))
    xi = PiecewiseControl(Partition.uniform(N + 2), np.zeros((K, 0)), d, pure=True)
    out = project_relaxed(xi, N).values
    # every cell at level N+1 spans one e_1 and one e_2 interval
    assert np.allclose(out, 0.5, atol=1e-15)
    assert np.all((out > 0) & (out < 1))


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 6), st.integers(2, 5))
def test_projected_weights_in_simplex(seed, N, q):
    xi = relaxed(np.random.default_rng(seed), 23, q)
    d = project_relaxed(xi, N).values
    assert np.all(d >= 0) and np.all(d <= 1)
    assert np.allclose(d.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- pulse-width modulation

def test_pwm_pure_input():
    sig = DyadicSignal(2, np.tile([1.0, 0.0, 0.0], (4, 1)))
    part, modes = pwm(sig, 2)
    assert part.samples.size == 1 + 3 * 4
    d = modes[part.widths > 0]
    assert np.all(d[:, 0] == 1.0)
    assert np.array_equal(np.unique(part.samples), Partition.uniform(2).samples)


def test_pwm_half_half():
    part, modes = pwm(DyadicSignal(1, np.full((2, 2), 0.5)), 1)
    assert np.array_equal(part.samples, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert np.array_equal(modes, [[1, 0], [0, 1], [1, 0], [0, 1]])


def test_pwm_keeps_zero_length_pulse():
    part, modes = pwm(DyadicSignal(1, [[1.0, 0.0], [0.5, 0.5]]), 1)
    assert np.array_equal(part.samples, [0.0, 0.5, 0.5, 0.75, 1.0])
    assert part.widths[1] == 0.0 and modes[1, 1] == 1.0


def test_pwm_samples_left_endpoint():
    # level 2 weights, frame level 1: cells 1 and 3 must be ignored
    sig = DyadicSignal(2, [[1.0, 0.0], [0.0, 1.0], [0.25, 0.75], [1.0, 0.0]])
    part, _ = pwm(sig, 1)
    assert np.allclose(part.samples, [0.0, 0.5, 0.5, 0.625, 1.0])


def test_pwm_level_too_coarse():
    with pytest.raises(InvalidControl):
        pwm(DyadicSignal(0, [[1.0, 0.0]]), 1)


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 6), st.integers(2, 4))
def test_pwm_validity_and_allocation(seed, N, q):
    xi = relaxed(np.random.default_rng(seed), 19, q)
    w = project_relaxed(xi, N)
    part, modes = pwm(w, N)
    assert part.samples.size == 1 + q * 2 ** N
    assert np.all((modes == 0) | (modes == 1))
    assert np.all(modes.sum(axis=1) == 1)
    # time allocated to each mode within each frame equals the sampled weight
    alloc = part.widths.reshape(2 ** N, q) * 2 ** N
    assert np.allclose(alloc, w.values[:: 2 ** (w.level - N)][: 2 ** N], atol=1e-12)


# ---------------------------------------------------------------- composite projection

def test_rho_sample_count():
    box = np.array([[-1.0, 1.0]])
    xi = relaxed(np.random.default_rng(0), 7, 3, m=1, box=box)
    for N in range(5):
        pure, part = rho(xi, box, N)
        assert part.samples.size == 1 + 3 * 2 ** N
        assert part.level == N
        assert pure.partition is part
        assert induced_partition(xi, N).samples.tolist() == part.samples.tolist()


def test_rho_fixed_point_for_dyadic_pure_control():
    rng = np.random.default_rng(4)
    box = np.array([[-2.0, 2.0]])
    base = Partition.uniform(3)
    u = rng.uniform(-2, 2, size=(8, 1))
    d = np.eye(2)[rng.integers(0, 2, size=8)]
    xi = PiecewiseControl(base, u, d, pure=True)
    pure, part = rho(xi, box, 6)
    t = (np.arange(4096) + 0.5) / 4096
    for tk in t:
        ua, da = xi.value_at(tk)
        ub, db = pure.value_at(tk)
        assert np.allclose(ua, ub, atol=1e-12) and np.array_equal(da, db)


def test_rho_stays_in_box():
    box = np.array([[0.0, 1e-3], [-1.0, 3.0]])
    rng = np.random.default_rng(7)
    xi = relaxed(rng, 31, 2, m=2, box=box)
    for N in range(7):
        pure, _ = rho(xi, box, N)
        assert np.all(pure.u >= box[:, 0]) and np.all(pure.u <= box[:, 1])
        assert pure.pure

