"""The four reference systems: switched LQR, double tank, planar quadrotor, bevel-tip needle.

Running costs are folded into an extra accumulator state (the last component)
that the terminal cost adds back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import AlgoParams, Partition, PiecewiseControl
from .relax_project import rho
from .simulate import Constraint, SystemModel

TANK_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class BenchmarkSpec:
    name: str
    params: AlgoParams
    init: PiecewiseControl
    expected_cost: float
    notes: str = ""


# ---------------------------------------------------------------- LQR

LQR_A = np.array([[1.0979, -0.0105, 0.0167],
                  [-0.0105, 1.0481, 0.0825],
                  [0.0167, 0.0825, 1.1540]])
LQR_B = np.array([[0.9801, -0.1987, 0.0],
                  [0.1743, 0.8601, -0.4794],
                  [0.0952, 0.4699, 0.8776]])
LQR_TARGET = np.ones(3)


def make_lqr() -> tuple[SystemModel, BenchmarkSpec]:
    def f(t, x, u, i):
        out = np.empty(4)
        out[:3] = LQR_A @ x[:3] + LQR_B[i] * u[0]
        out[3] = 0.01 * u[0] ** 2
        return out

    jx = np.zeros((4, 4))
    jx[:3, :3] = LQR_A

    def fx(t, x, u, i):
        return jx

    def fu(t, x, u, i):
        return np.concatenate([LQR_B[i], [0.02 * u[0]]]).reshape(4, 1)

    def h0(x):
        e = x[:3] - LQR_TARGET
        return float(e @ e + x[3])

    def h0_grad(x):
        return np.concatenate([2.0 * (x[:3] - LQR_TARGET), [1.0]])

    model = SystemModel(n=4, m=1, q=3, vector_field=f, jac_x=fx, jac_u=fu,
                        terminal_cost=h0, terminal_cost_grad=h0_grad,
                        input_box=[[-20.0, 20.0]], x0=np.zeros(4), t0=0.0, tf=2.0, name="lqr")
    params = AlgoParams(alpha=0.1, beta=0.87, alpha_bar=0.005, beta_bar=0.72, gamma=1.0,
                        omega=1e-6, Lambda=1e-4, chi=0.25, N0=4, theta_stop=-1e-2)
    init = PiecewiseControl.constant(Partition.uniform(4), [0.0], [1.0, 0.0, 0.0])
    return model, BenchmarkSpec("lqr", params, init, 1.23e-3)


# ---------------------------------------------------------------- tank

def _tank_sqrt(x: float) -> float:
    return math.sqrt(max(x, 0.0))


def _tank_sqrt_d(x: float) -> float:
    # capped below TANK_EPS where the exact slope blows up
    return 0.5 / math.sqrt(max(x, TANK_EPS)) if x > 0.0 else 0.0


def make_tank() -> tuple[SystemModel, BenchmarkSpec]:
    inflow = (1.0, 2.0)

    def f(t, x, u, i):
        s1, s2 = _tank_sqrt(x[0]), _tank_sqrt(x[1])
        return np.array([inflow[i] - s1, s1 - s2, 2.0 * (x[1] - 3.0) ** 2])

    def fx(t, x, u, i):
        d1, d2 = _tank_sqrt_d(x[0]), _tank_sqrt_d(x[1])
        return np.array([[-d1, 0.0, 0.0],
                         [d1, -d2, 0.0],
                         [0.0, 4.0 * (x[1] - 3.0), 0.0]])

    def fu(t, x, u, i):
        return np.zeros((3, 0))

    model = SystemModel(n=3, m=0, q=2, vector_field=f, jac_x=fx, jac_u=fu,
                        terminal_cost=lambda x: float(x[2]),
                        terminal_cost_grad=lambda x: np.array([0.0, 0.0, 1.0]),
                        input_box=np.zeros((0, 2)), x0=np.zeros(3), t0=0.0, tf=10.0, name="tank")
    params = AlgoParams(alpha=0.01, beta=0.75, alpha_bar=0.005, beta_bar=0.72, gamma=100.0,
                        omega=1e-6, Lambda=1e-4, chi=0.25, N0=7, theta_stop=-1e-2)
    init = PiecewiseControl.constant(Partition.uniform(7), np.zeros(0), [1.0, 0.0])
    return model, BenchmarkSpec("tank", params, init, 4.829,
                                notes=f"square-root slope capped below {TANK_EPS:g}")


# ---------------------------------------------------------------- quadrotor

QUAD_M, QUAD_L, QUAD_I, QUAD_G = 1.3, 0.305, 0.0605, 9.8


def make_quadrotor() -> tuple[SystemModel, BenchmarkSpec]:
    M, L, I, g = QUAD_M, QUAD_L, QUAD_I, QUAD_G

    def f(t, x, u, i):
        th, uu = x[2], u[0]
        out = np.zeros(7)
        out[:3] = x[3:6]
        if i == 0:
            out[3] = math.sin(th) / M * (uu + M * g)
            out[4] = math.cos(th) / M * (uu + M * g) - g
        else:
            out[3] = g * math.sin(th)
            out[4] = g * math.cos(th) - g
            out[5] = (-1.0 if i == 1 else 1.0) * L * uu / I
        out[6] = 5.0 * uu ** 2
        return out

    def fx(t, x, u, i):
        th, uu = x[2], u[0]
        J = np.zeros((7, 7))
        J[0, 3] = J[1, 4] = J[2, 5] = 1.0
        if i == 0:
            J[3, 2] = math.cos(th) / M * (uu + M * g)
            J[4, 2] = -math.sin(th) / M * (uu + M * g)
        else:
            J[3, 2] = g * math.cos(th)
            J[4, 2] = -g * math.sin(th)
        return J

    def fu(t, x, u, i):
        th, uu = x[2], u[0]
        B = np.zeros((7, 1))
        if i == 0:
            B[3, 0] = math.sin(th) / M
            B[4, 0] = math.cos(th) / M
        else:
            B[5, 0] = (-1.0 if i == 1 else 1.0) * L / I
        B[6, 0] = 10.0 * uu
        return B

    def h0(x):
        return float(5.0 * (x[0] - 6.0) ** 2 + 5.0 * (x[1] - 1.0) ** 2 + math.sin(x[2] / 2.0) ** 2 + x[6])

    def h0_grad(x):
        gr = np.zeros(7)
        gr[0] = 10.0 * (x[0] - 6.0)
        gr[1] = 10.0 * (x[1] - 1.0)
        gr[2] = 0.5 * math.sin(x[2])  # d/dx sin^2(x/2)
        gr[6] = 1.0
        return gr

    ground_grad = np.zeros(7)
    ground_grad[1] = -1.0
    ground = Constraint(lambda x: float(-x[1]), lambda x: ground_grad, "ground")
    x0 = np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    model = SystemModel(n=7, m=1, q=3, vector_field=f, jac_x=fx, jac_u=fu,
                        terminal_cost=h0, terminal_cost_grad=h0_grad, constraints=[ground],
                        input_box=[[0.0, 1e-3]], x0=x0, t0=0.0, tf=7.5, name="quadrotor")
    params = AlgoParams(alpha=0.01, beta=0.80, alpha_bar=5e-4, beta_bar=0.72, gamma=10.0,
                        omega=1e-6, Lambda=1e-4, chi=0.25, N0=6, theta_stop=-1e-4)
    relaxed = PiecewiseControl.constant(Partition.uniform(6), [5e-4], [0.33, 0.34, 0.33])
    init, _ = rho(relaxed, model.input_box, params.N0)
    return model, BenchmarkSpec("quadrotor", params, init, 0.128,
                                notes="relaxed initial weights projected once at level N0")


# ---------------------------------------------------------------- needle

NEEDLE_KAPPA = 0.22
NEEDLE_TARGET = np.array([-2.0, 3.5, 10.0])
NEEDLE_CENTERS = np.array([[0.0, 0.0, 5.0], [1.0, 3.0, 7.0], [-2.0, 0.0, 10.0]])
NEEDLE_RADIUS = 2.0


def _needle_forward(x) -> np.ndarray:
    """Mode-1 field per unit insertion speed (first six components)."""
    k = NEEDLE_KAPPA
    s4, c4 = math.sin(x[3]), math.cos(x[3])
    s5, c5 = math.sin(x[4]), math.cos(x[4])
    s6, c6 = math.sin(x[5]), math.cos(x[5])
    return np.array([s5, -c5 * s4, c4 * c5, k * c6 / c5, k * s6, -k * c6 * s5 / c5])


def make_needle() -> tuple[SystemModel, BenchmarkSpec]:
    k = NEEDLE_KAPPA

    def f(t, x, u, i):
        out = np.zeros(7)
        if i == 0:
            out[:6] = _needle_forward(x) * u[0]
        else:
            out[5] = u[1]
        out[6] = 0.01 * (u[0] ** 2 + u[1] ** 2)
        return out

    def fx(t, x, u, i):
        J = np.zeros((7, 7))
        if i == 1:
            return J
        u1 = u[0]
        s4, c4 = math.sin(x[3]), math.cos(x[3])
        s5, c5 = math.sin(x[4]), math.cos(x[4])
        s6, c6 = math.sin(x[5]), math.cos(x[5])
        sec5, tan5 = 1.0 / c5, s5 / c5
        J[0, 4] = c5
        J[1, 3] = -c5 * c4
        J[1, 4] = s5 * s4
        J[2, 3] = -s4 * c5
        J[2, 4] = -c4 * s5
        J[3, 4] = k * c6 * sec5 * tan5
        J[3, 5] = -k * s6 * sec5
        J[4, 5] = k * c6
        J[5, 4] = -k * c6 * sec5 ** 2
        J[5, 5] = k * s6 * tan5
        return J * u1

    def fu(t, x, u, i):
        B = np.zeros((7, 2))
        if i == 0:
            B[:6, 0] = _needle_forward(x)
        else:
            B[5, 1] = 1.0
        B[6, 0] = 0.02 * u[0]
        B[6, 1] = 0.02 * u[1]
        return B

    def h0(x):
        e = x[:3] - NEEDLE_TARGET
        return float(e @ e + x[6])

    def h0_grad(x):
        gr = np.zeros(7)
        gr[:3] = 2.0 * (x[:3] - NEEDLE_TARGET)
        gr[6] = 1.0
        return gr

    def sphere(c):
        def h(x):
            e = x[:3] - c
            return float(NEEDLE_RADIUS ** 2 - e @ e)

        def grad(x):
            gr = np.zeros(7)
            gr[:3] = -2.0 * (x[:3] - c)
            return gr
        return Constraint(h, grad, f"sphere{tuple(c)}")

    model = SystemModel(n=7, m=2, q=2, vector_field=f, jac_x=fx, jac_u=fu,
                        terminal_cost=h0, terminal_cost_grad=h0_grad,
                        constraints=[sphere(c) for c in NEEDLE_CENTERS],
                        input_box=[[0.0, 5.0], [-math.pi / 2, math.pi / 2]], x0=np.zeros(7),
                        t0=0.0, tf=8.0, name="needle")
    params = AlgoParams(alpha=0.002, beta=0.72, alpha_bar=0.001, beta_bar=0.71, gamma=100.0,
                        omega=0.05, Lambda=1e-4, chi=0.25, N0=6, theta_stop=-1e-3)
    relaxed = PiecewiseControl.constant(Partition.uniform(6), [0.0, 0.0], [0.5, 0.5])
    init, _ = rho(relaxed, model.input_box, params.N0)
    return model, BenchmarkSpec("needle", params, init, 0.302,
                                notes="relaxed initial weights projected once at level N0")


REGISTRY: dict[str, Callable[[], tuple[SystemModel, BenchmarkSpec]]] = {
    "lqr": make_lqr,
    "tank": make_tank,
    "quadrotor": make_quadrotor,
    "needle": make_needle,
}


def get(name: str) -> tuple[SystemModel, BenchmarkSpec]:
    try:
        return REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(REGISTRY)}") from None
