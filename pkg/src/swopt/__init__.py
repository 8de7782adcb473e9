"""Optimal control of constrained nonlinear switched systems.

The discrete mode input is relaxed to simplex-valued weights, a descent
direction is obtained from a min-max optimality function, and iterates are
projected back to pure switching signals by Haar truncation followed by
pulse-width modulation, with the time grid refined as needed.
"""

from .core import AlgoParams, ControlDirection, Partition, PiecewiseControl, bv_seminorm, x_norm
from .driver import RunResult, feasibility_monitor, run
from .simulate import Constraint, SystemModel, evaluate, integrate

__all__ = [
    "AlgoParams", "Constraint", "ControlDirection", "Partition", "PiecewiseControl", "RunResult",
    "SystemModel", "bv_seminorm", "evaluate", "feasibility_monitor", "integrate", "run", "x_norm",
]
