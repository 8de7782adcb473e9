import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swopt import benchmarks
from swopt.core import ControlDirection, Partition, PiecewiseControl, refine_onto
from swopt.errors import NonFinite, OutOfRange
from swopt.simulate import (Constraint, SystemModel, Unconstrained, constraint_eval, cost,
                            directional_derivative_flow, evaluate, functional_gradients, integrate,
                            interpolate, linearized_flow, transition_stack)


def scalar_model(field, jac_x, jac_u=None, m=0, q=1, x0=1.0, h0=lambda x: float(x[0]),
                 h0_grad=lambda x: np.array([1.0]), constraints=(), box=None):
    jac_u = jac_u or (lambda t, x, u, i: np.zeros((1, m)))
    return SystemModel(n=1, m=m, q=q, vector_field=field, jac_x=jac_x, jac_u=jac_u,
                       terminal_cost=h0, terminal_cost_grad=h0_grad, constraints=constraints,
                       input_box=box if box is not None else np.zeros((m, 2)), x0=[x0])


def exp_model(a=1.0):
    return scalar_model(lambda t, x, u, i: a * x, lambda t, x, u, i: np.array([[a]]))


def small_random_model(seed):
    """Nonlinear 2-state, 2-mode, 1-input model with one constraint."""
    rng = np.random.default_rng(seed)
    A = rng.normal(scale=0.5, size=(2, 2, 2))
    B = rng.normal(size=(2, 2))

    def f(t, x, u, i):
        return A[i] @ x + B[i] * u[0] + 0.1 * np.sin(x[::-1])

    def fx(t, x, u, i):
        return A[i] + 0.1 * np.array([[0.0, np.cos(x[1])], [np.cos(x[0]), 0.0]])

    def fu(t, x, u, i):
        return B[i].reshape(2, 1)

    con = Constraint(lambda x: float(x[0] ** 2 - 1.0), lambda x: np.array([2 * x[0], 0.0]))
    return SystemModel(n=2, m=1, q=2, vector_field=f, jac_x=fx, jac_u=fu,
                       terminal_cost=lambda x: float(x @ x), terminal_cost_grad=lambda x: 2 * x,
                       constraints=[con], input_box=[[-1.0, 1.0]], x0=[0.3, -0.2], tf=1.5)


def random_control(rng, part, m=1, q=2):
    d = rng.dirichlet(np.ones(q), size=part.n_intervals)
    return PiecewiseControl(part, rng.uniform(-1, 1, size=(part.n_intervals, m)), d)


def random_partition(rng, K):
    return Partition.from_samples(np.concatenate([[0.0], np.sort(rng.uniform(size=K - 1)), [1.0]]))


# ---------------------------------------------------------------- integrate

def test_zero_field_keeps_state():
    model = scalar_model(lambda t, x, u, i: np.zeros(1), lambda t, x, u, i: np.zeros((1, 1)), x0=3.0)
    xi = PiecewiseControl.constant(Partition.uniform(3), np.zeros(0), [1.0])
    assert np.all(integrate(model, xi).nodes == 3.0)


@pytest.mark.parametrize("N", [0, 3, 6])
def test_exponential_closed_form(N):
    xi = PiecewiseControl.constant(Partition.uniform(N), np.zeros(0), [1.0])
    z = integrate(exp_model(), xi).final[0]
    assert z == pytest.approx((1 + 2.0 ** -N) ** (2 ** N), rel=1e-14)


def test_two_modes_cancel():
    model = scalar_model(lambda t, x, u, i: np.array([1.0 if i == 0 else -1.0]),
                         lambda t, x, u, i: np.zeros((1, 1)), q=2, x0=0.0)
    xi = PiecewiseControl(Partition.uniform(2), np.zeros((4, 0)), [[1, 0], [1, 0], [0, 1], [0, 1]], pure=True)
    assert integrate(model, xi).final[0] == 0.0


def test_blowup_raises():
    xi = PiecewiseControl.constant(Partition.uniform(2), np.zeros(0), [1.0])
    with pytest.raises(NonFinite):
        integrate(exp_model(1e100), xi)


def test_time_rescaling_matches_unscaled_reference():
    model, _ = benchmarks.get("quadrotor")
    rng = np.random.default_rng(3)
    part = Partition.uniform(5)
    xi = PiecewiseControl(part, rng.uniform(0, 1e-3, size=(32, 1)), np.eye(3)[rng.integers(0, 3, 32)], pure=True)
    nodes = integrate(model, xi).nodes
    # plain Euler on [t0, tf] with unscaled fields
    x = model.x0.copy()
    ref = [x.copy()]
    dt = model.duration / 32
    for k in range(32):
        t = model.t0 + k * dt
        i = int(np.argmax(xi.d[k]))
        x = x + dt * np.asarray(model.vector_field(t, x, xi.u[k], i))
        ref.append(x.copy())
    assert np.allclose(nodes, np.array(ref), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- cost and constraints

def test_cost_examples():
    model = scalar_model(lambda t, x, u, i: np.zeros(1), lambda t, x, u, i: np.zeros((1, 1)), x0=0.0,
                         h0=lambda x: float(x @ x), h0_grad=lambda x: 2 * x)
    xi = PiecewiseControl.constant(Partition.uniform(1), np.zeros(0), [1.0])
    assert cost(model, integrate(model, xi)) == 0.0
    model3 = scalar_model(lambda t, x, u, i: np.zeros(1), lambda t, x, u, i: np.zeros((1, 1)), x0=3.0)
    assert cost(model3, integrate(model3, xi)) == 3.0


def test_constraint_eval_examples():
    zero = lambda t, x, u, i: np.zeros(1)
    model = scalar_model(zero, lambda t, x, u, i: np.zeros((1, 1)))
    xi = PiecewiseControl.constant(Partition.uniform(1), np.zeros(0), [1.0])
    assert constraint_eval(model, integrate(model, xi))[0] is Unconstrained

    con = Constraint(lambda x: float(x[0] - 1.0), lambda x: np.ones(1))
    model0 = scalar_model(zero, lambda t, x, u, i: np.zeros((1, 1)), x0=0.0, constraints=[con])
    psi, values, arg = constraint_eval(model0, integrate(model0, xi))
    assert psi == -1.0 and arg == (0, 0)

    ident = Constraint(lambda x: float(x[0]), lambda x: np.ones(1))
    model1 = scalar_model(zero, lambda t, x, u, i: np.zeros((1, 1)), constraints=[ident])
    from swopt.simulate import DiscreteTrajectory
    traj = DiscreteTrajectory(Partition.uniform(1), np.array([[0.0], [2.0], [1.0]]))
    psi, _, arg = constraint_eval(model1, traj)
    assert psi == 2.0 and arg == (0, 1)


# ---------------------------------------------------------------- interpolation

def test_interpolate():
    from swopt.simulate import DiscreteTrajectory
    p = Partition(np.array([0.0, 0.5, 0.5, 1.0]), level=1)
    traj = DiscreteTrajectory(p, np.array([[0.0], [2.0], [2.0], [4.0]]))
    assert interpolate(traj, 0.5)[0] == 2.0
    assert interpolate(traj, 0.25)[0] == 1.0
    assert interpolate(traj, 1.0)[0] == 4.0
    with pytest.raises(OutOfRange):
        interpolate(traj, 1.5)


# ---------------------------------------------------------------- transition matrices

def test_stm_identity_for_constant_field():
    model = scalar_model(lambda t, x, u, i: np.ones(1), lambda t, x, u, i: np.zeros((1, 1)))
    xi = PiecewiseControl.constant(Partition.uniform(3), np.zeros(0), [1.0])
    st_ = transition_stack(model, xi, integrate(model, xi))
    assert np.array_equal(st_.phi(8, 0), np.eye(1))


def test_stm_scalar_product():
    a, N = 0.7, 4
    model = exp_model(a)
    xi = PiecewiseControl.constant(Partition.uniform(N), np.zeros(0), [1.0])
    st_ = transition_stack(model, xi, integrate(model, xi))
    assert st_.phi(2 ** N, 0)[0, 0] == pytest.approx((1 + a * 2.0 ** -N) ** (2 ** N), rel=1e-14)
    assert np.array_equal(st_.phi(3, 3), np.eye(1))


@given(st.integers(0, 2 ** 31 - 1))
def test_stm_semigroup(seed):
    rng = np.random.default_rng(seed)
    model = small_random_model(seed % 7)
    xi = random_control(rng, random_partition(rng, 9))
    st_ = transition_stack(model, xi, integrate(model, xi))
    j, l, k = np.sort(rng.integers(0, 10, size=3))
    assert np.allclose(st_.phi(k, j), st_.phi(k, l) @ st_.phi(l, j), rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- directional derivatives

def test_one_interval_expansion():
    model = small_random_model(1)
    xi = random_control(np.random.default_rng(0), Partition.uniform(0))
    traj = integrate(model, xi)
    st_ = transition_stack(model, xi, traj)
    du, dd = np.array([[0.4]]), np.array([[0.3, -0.3]])
    got = directional_derivative_flow(model, xi, traj, st_, ControlDirection(xi.partition, du, dd), 1)
    x, u = model.x0, xi.u[0]
    expect = model.fu(0.0, x, u, 0) @ du[0] * xi.d[0, 0] + model.fu(0.0, x, u, 1) @ du[0] * xi.d[0, 1] \
        + model.f(0.0, x, u, 0) * dd[0, 0] + model.f(0.0, x, u, 1) * dd[0, 1]
    assert np.allclose(got, expect, rtol=1e-13)


def test_zero_direction():
    model = small_random_model(2)
    rng = np.random.default_rng(1)
    xi = random_control(rng, random_partition(rng, 5))
    traj = integrate(model, xi)
    st_ = transition_stack(model, xi, traj)
    z = ControlDirection.zeros_like(xi)
    assert np.all(linearized_flow(st_, z) == 0.0)


def test_flow_derivative_linear_convergence():
    model = small_random_model(3)
    rng = np.random.default_rng(2)
    xi = random_control(rng, random_partition(rng, 12))
    target = random_control(rng, xi.partition)
    v = target - xi
    traj = integrate(model, xi)
    st_ = transition_stack(model, xi, traj)
    exact = directional_derivative_flow(model, xi, traj, st_, v, 12)
    errs = []
    for lam in (1e-3, 1e-4, 1e-5):
        moved = PiecewiseControl(xi.partition, xi.u + lam * v.u, xi.d + lam * v.d)
        errs.append(np.linalg.norm((integrate(model, moved).final - traj.final) / lam - exact))
    assert errs[1] < 0.2 * errs[0] and errs[2] < 0.2 * errs[1]


@given(st.integers(0, 2 ** 31 - 1))
def test_recursion_matches_explicit_sum(seed):
    rng = np.random.default_rng(seed)
    model = small_random_model(seed % 5)
    xi = random_control(rng, random_partition(rng, 8))
    v = random_control(rng, xi.partition) - xi
    traj = integrate(model, xi)
    st_ = transition_stack(model, xi, traj)
    flow = linearized_flow(st_, v)
    for k in range(9):
        assert np.allclose(flow[k], directional_derivative_flow(model, xi, traj, st_, v, k),
                           rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_gradients_match_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    model = small_random_model(seed % 5)
    xi = random_control(rng, random_partition(rng, 7))
    v = random_control(rng, xi.partition) - xi
    traj = integrate(model, xi)
    st_ = transition_stack(model, xi, traj)
    g = functional_gradients(model, xi, traj, st_)
    dj, dpsi = g.apply(v)
    flow = linearized_flow(st_, v)
    assert dj == pytest.approx(float(model.terminal_cost_grad(traj.final) @ flow[-1]), rel=1e-10, abs=1e-12)
    c = model.constraints[0]
    direct = np.array([c.grad(traj.nodes[k]) @ flow[k] for k in range(8)])
    assert np.allclose(dpsi[0], direct, rtol=1e-10, atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_gradients_are_linear(seed):
    rng = np.random.default_rng(seed)
    model = small_random_model(seed % 5)
    xi = random_control(rng, random_partition(rng, 6))
    traj = integrate(model, xi)
    g = functional_gradients(model, xi, traj, transition_stack(model, xi, traj))
    a = random_control(rng, xi.partition) - xi
    b = random_control(rng, xi.partition) - xi
    ja, pa = g.apply(a)
    jb, pb = g.apply(b)
    jab, pab = g.apply(a * 2.0 + b)
    assert jab == pytest.approx(2 * ja + jb, abs=1e-12)
    assert np.allclose(pab, 2 * pa + pb, atol=1e-12)


def test_scalar_integrator_gradient():
    model = scalar_model(lambda t, x, u, i: np.array([u[0]]), lambda t, x, u, i: np.zeros((1, 1)),
                         jac_u=lambda t, x, u, i: np.ones((1, 1)), m=1, x0=0.0, box=[[-1.0, 1.0]])
    xi = PiecewiseControl.constant(Partition.uniform(0), [0.2], [1.0])
    traj = integrate(model, xi)
    g = functional_gradients(model, xi, traj, transition_stack(model, xi, traj))
    assert g.cost_u[0, 0] == 1.0  # delta tau of the single interval


def test_zero_terminal_gradient():
    model = scalar_model(lambda t, x, u, i: x, lambda t, x, u, i: np.eye(1),
                         h0=lambda x: 0.0, h0_grad=lambda x: np.zeros(1))
    xi = PiecewiseControl.constant(Partition.uniform(3), np.zeros(0), [1.0])
    traj = integrate(model, xi)
    g = functional_gradients(model, xi, traj, transition_stack(model, xi, traj))
    assert np.all(g.cost_d == 0.0)


# ---------------------------------------------------------------- convergence rates

def euler_error_ratios(name, control_seed=0, levels=range(4, 9), ref_level=None):
    model, spec = benchmarks.get(name)
    rng = np.random.default_rng(control_seed)
    base = Partition.uniform(3)
    d = np.eye(model.q)[rng.integers(0, model.q, size=8)]
    if model.m:
        lo, hi = model.input_box[:, 0], model.input_box[:, 1]
        u = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo), size=(8, model.m))
    else:
        u = np.zeros((8, 0))
    xi = PiecewiseControl(base, u, d, pure=True)
    out = []
    for N in levels:
        ref = evaluate(model, refine_onto(xi, Partition.uniform(ref_level or N + 8)))
        cur = evaluate(model, refine_onto(xi, Partition.uniform(N)))
        out.append((np.linalg.norm(cur.traj.final - ref.traj.final), abs(cur.J - ref.J)))
    return out


# the needle is far from its asymptotic regime on coarse meshes
@pytest.mark.parametrize("name,levels,ref", [("lqr", range(4, 9), None), ("tank", range(4, 9), None),
                                             ("quadrotor", range(4, 9), None),
                                             ("needle", range(8, 12), 17)])
def test_euler_first_order_rate(name, levels, ref):
    errs = euler_error_ratios(name, levels=levels, ref_level=ref)
    state = [e[0] for e in errs]
    ratios = [b / a for a, b in zip(state, state[1:])]
    assert all(0.4 <= r <= 0.6 for r in ratios), ratios
