"""Command-line front end.

    swopt run --system lqr --out results/ [--set key=value]... [--emit trajectory,iterations,plotdata]
    swopt check projection|sensitivity|euler|optimality|all

Exit status: 0 when a run stops on the optimality threshold or every check
passes, 2 when a run hits the iteration or step cap, 1 on any error.
"""

from __future__ import annotations

import argparse
import csv
import importlib.util
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import benchmarks, checks
from .core import AlgoParams
from .driver import THETA_STOP, IterationRecord, RunResult, run
from .errors import SwoptError
from .simulate import Unconstrained, evaluate

log = logging.getLogger("swopt")

EMIT_CHOICES = ("trajectory", "iterations", "plotdata")
DEFAULT_EMIT = ("trajectory", "iterations")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CAP = 2


class ConfigError(SwoptError):
    pass


@dataclass
class RunConfig:
    system: str
    out_dir: Path
    overrides: dict = field(default_factory=dict)
    emit: tuple = DEFAULT_EMIT


def parse_overrides(pairs: list[str]) -> dict:
    """Turn ``key=value`` strings into typed AlgoParams overrides."""
    types = {f.name: f.type for f in fields(AlgoParams)}
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        if key not in types:
            raise ConfigError(f"unknown parameter {key!r}; known: {', '.join(types)}")
        try:
            value = float(raw)
        except ValueError:
            raise ConfigError(f"{key}: {raw!r} is not a number") from None
        if types[key] in ("int", int):
            if not value.is_integer():
                raise ConfigError(f"{key} must be an integer, got {raw!r}")
            value = int(value)
        out[key] = value
    return out


def parse_emit(text: str | None) -> tuple:
    if text is None:
        return DEFAULT_EMIT
    items = tuple(x.strip() for x in text.split(",") if x.strip())
    bad = [x for x in items if x not in EMIT_CHOICES]
    if bad:
        raise ConfigError(f"unknown --emit item(s) {bad}; choose from {list(EMIT_CHOICES)}")
    return items


def load_system(system: str):
    """A registered benchmark name, or a path to a Python file defining ``make()``.

    ``make()`` must return ``(SystemModel, BenchmarkSpec)`` like the builders
    in :mod:`swopt.benchmarks`.
    """
    if system in benchmarks.REGISTRY:
        return benchmarks.get(system)
    path = Path(system)
    if not path.is_file():
        raise ConfigError(f"unknown system {system!r}; choose from {sorted(benchmarks.REGISTRY)} "
                          "or give a path to a model file")
    spec = importlib.util.spec_from_file_location(f"swopt_user_model_{path.stem}", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "make"):
        raise ConfigError(f"{path} does not define make()")
    return module.make()


def _num(v):
    """JSON-safe float: the unconstrained marker and non-finite values become null."""
    if v is None or v is Unconstrained:
        return None
    v = float(v)
    return v if np.isfinite(v) else None


def _record_dict(rec: IterationRecord) -> dict:
    d = rec.as_dict()
    # wall time goes to timing.json so these files stay byte-identical across runs
    d.pop("wall_time")
    d["theta_tau"] = _num(d["theta_tau"])
    d["J_tau"] = _num(d["J_tau"])
    d["Psi_tau"] = _num(d["Psi_tau"])
    return d


def write_trajectory(path: Path, model, result: RunResult) -> int:
    """One row per partition node; node ``k`` carries the control of interval ``k``
    (the last node repeats the final interval's control)."""
    xi = result.final_control
    traj = evaluate(model, xi).traj
    s = xi.partition.samples
    K = xi.n_intervals
    idx = np.minimum(np.arange(K + 1), K - 1)
    header = (["t"] + [f"x_{i + 1}" for i in range(model.n)] + [f"u_{i + 1}" for i in range(model.m)]
              + [f"d_{i + 1}" for i in range(model.q)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(K + 1):
            row = [model.real_time(s[k]), *traj.nodes[k], *xi.u[idx[k]], *xi.d[idx[k]]]
            w.writerow([f"{float(v):.17g}" for v in row])
    return K + 1


def write_plotdata(path: Path, model, result: RunResult) -> None:
    xi = result.final_control
    traj = evaluate(model, xi).traj
    data = {
        "system": model.name,
        "t": [float(model.real_time(t)) for t in xi.partition.samples],
        "x": traj.nodes.T.tolist(),
        "u": xi.u.T.tolist(),
        "d_active": [int(i) for i in np.argmax(xi.d, axis=1)],
        "iterations": {
            "j": [r.j for r in result.history],
            "N": [r.N_j for r in result.history],
            "J": [_num(r.J_tau) for r in result.history],
            "Psi": [_num(r.Psi_tau) for r in result.history],
            "theta": [_num(r.theta_tau) for r in result.history],
        },
    }
    path.write_text(json.dumps(data, indent=1) + "\n")


def cmd_run(config: RunConfig) -> int:
    model, spec = load_system(config.system)
    params = spec.params.updated(**config.overrides)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jsonl = None
    if "iterations" in config.emit:
        jsonl = open(out / "iterations.jsonl", "w")

    def sink(rec: IterationRecord) -> None:
        if jsonl is not None:
            jsonl.write(json.dumps(_record_dict(rec)) + "\n")
            jsonl.flush()

    t0 = time.perf_counter()
    try:
        result = run(model, params, spec.init, sink=sink)
    finally:
        if jsonl is not None:
            jsonl.close()
    wall = time.perf_counter() - t0

    if "trajectory" in config.emit:
        write_trajectory(out / "trajectory.csv", model, result)
    if "plotdata" in config.emit:
        write_plotdata(out / "plotdata.json", model, result)
    summary = {
        "system": model.name,
        "termination": result.termination,
        "final_cost": _num(result.final_J),
        "final_Psi": _num(result.final_Psi),
        "final_theta": _num(result.final_theta),
        "final_N": result.final_N,
        "mesh": float(result.final_partition.mesh),
        "samples": int(result.final_partition.samples.size),
        "iterations": len(result.history),
        "expected_cost": spec.expected_cost,
        "params": {f.name: getattr(params, f.name) for f in fields(params)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    timing = {"wall_time": wall, "per_iteration": [r.wall_time for r in result.history]}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    log.info("%s: %s after %d iterations, J=%.6g", model.name, result.termination,
             len(result.history), result.final_J)
    return EXIT_OK if result.termination == THETA_STOP else EXIT_CAP


def cmd_check(suite: str) -> int:
    results = checks.run_suite(suite)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return EXIT_OK if failed == 0 else EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swopt", description="Switched-system optimal control solver")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a benchmark or a user model")
    r.add_argument("--system", required=True, help="benchmark name or path to a model file")
    r.add_argument("--out", required=True, type=Path, help="output directory")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override an algorithm parameter (repeatable)")
    r.add_argument("--emit", default=None, help=f"comma list from {','.join(EMIT_CHOICES)}")
    c = sub.add_parser("check", help="run an invariant suite")
    c.add_argument("suite", choices=sorted(checks.SUITES) + ["all"])
    return ap


def _setup_logging() -> None:
    level = os.environ.get("SWOPT_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"SWOPT_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.command == "check":
            return cmd_check(args.suite)
        config = RunConfig(system=args.system, out_dir=args.out,
                           overrides=parse_overrides(args.set), emit=parse_emit(args.emit))
        return cmd_run(config)
    except (SwoptError, ValueError, ArithmeticError, OSError) as exc:
        print(f"swopt: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
