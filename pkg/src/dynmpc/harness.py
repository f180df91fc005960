"""Closed-loop simulation: scenario files, deterministic traces, metrics.

A :class:`Scenario` bundles everything one closed-loop experiment needs —
plant, controller configuration, initial state, run length, exogenous
schedules, and a seed — so any run in the test suite or on the command
line is reproducible from a single declarative file.  Scenario files are
TOML with the following tables (see ``scenarios/`` for examples)::

    [scenario]                    # required
    name = "chain-divergence"
    steps = 500                   # plant steps to simulate
    seed = 0                      # recorded provenance seed
    divergence_threshold = 1e6    # truncate when |x| exceeds this

    [system]                      # required
    id = "msd-chain"              # a benchmark id
    # ... remaining keys are forwarded to the benchmark factory

    [controller]                  # required
    scheme = "stabilizing"        # any scheme name except trajectory-tracking
    N = 8
    # optional: T, M, nu, S, beta, beta_adaptive, alpha_min,
    # shifted_terminal, economic_terminal_mode, rollout_horizon,
    # terminal = "synthesized" | "equality" | "none",
    # ingredients_file = "relative/path.json"   (pre-synthesized),
    # setpoint = [..] and input = [..]          (reference equilibrium),
    # orbit_x = [[..], ..] and orbit_u = [[..], ..] (initial orbit),
    # Q = [[..], ..], R = [[..], ..]            (stage-weight overrides)

    [exogenous]                   # optional
    y_d = [2.0]                   # constant target output
    y_e = [1.0]                   # constant economic parameter
    y_d_period = [[..], ..]       # one target row per phase (period T)
    y_e_period = [[..], ..]       # one parameter row per phase
    use_benchmark_price = true    # install the benchmark's price signal
    [[exogenous.y_d_steps]]       # piecewise-constant switches
    t = 0
    value = [1.0]
    # ... likewise y_e_steps, y_d_period_steps, y_e_period_steps
    # (period switches replace the whole per-phase table from step t on)

Traces are written as CSV with a two-line comment header; all floats use
the shortest round-trip format (%.17g worst case), so a reloaded trace
reproduces every recorded number bit for bit and the derived metrics are
recomputable exactly.  Per-step wall-clock times are kept in memory only
— they are measurements of the machine, not of the experiment — and are
deliberately excluded from the CSV and the summary.
"""

import bisect
import json
import math
import os
import time

import numpy as np
import tomli

from .benchmarks import get_benchmark
from .model import ExogenousSignal, Reference
from .schemes import (ControllerState, InfeasibleProblem, MpcProblemSpec,
                      apply_controller, optimal_periodic_reference,
                      optimal_steady_state)
from .terminal import (TerminalIngredients, synth_terminal_economic,
                       synth_terminal_economic_periodic,
                       synth_terminal_setpoint, synth_terminal_trajectory,
                       terminal_equality)

__all__ = [
    "ScenarioError",
    "Schedule",
    "Scenario",
    "ClosedLoopTrace",
    "CompareReport",
    "build_controller",
    "run_closed_loop",
    "run_scenario",
    "compare_traces",
    "run_batch",
    "atomic_write_text",
]

_FIXED_REF = ("stabilizing", "trajectory-tracking", "economic",
              "periodic-economic")


class ScenarioError(RuntimeError):
    """A scenario cannot be built or is infeasible at its initial state."""


# ----------------------------------------------------------------------
def atomic_write_text(path, text):
    """Write text to path via a sibling temp file and an atomic rename."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ----------------------------------------------------------------------
class Schedule:
    """Piecewise-constant schedule of vectors or whole per-phase tables.

    ``pieces`` is a list of (start_step, value); the value active at step
    t is the one with the largest start <= t.  Values are either vectors
    (targets, parameters) or 2-D arrays with one row per phase of a
    period; ``window(t, T)`` rotates the active table so entry j is the
    phase of absolute step t + j.
    """

    def __init__(self, pieces):
        pieces = sorted(((int(t), np.asarray(v, float)) for t, v in pieces),
                        key=lambda p: p[0])
        if not pieces:
            raise ScenarioError("a schedule needs at least one piece")
        if pieces[0][0] > 0:
            raise ScenarioError("a schedule must start at step 0")
        starts = [t for t, _ in pieces]
        if len(set(starts)) != len(starts):
            raise ScenarioError("duplicate schedule start steps")
        self.starts = starts
        self.values = [v for _, v in pieces]

    @classmethod
    def constant(cls, value):
        return cls([(0, value)])

    def at(self, t):
        idx = bisect.bisect_right(self.starts, int(t)) - 1
        return self.values[idx]

    def window(self, t, length):
        table = np.atleast_2d(self.at(t))
        T = table.shape[0]
        return [table[(int(t) + j) % T] for j in range(int(length))]


def _parse_schedule(exo, key):
    """Schedule from `key` (constant) / `key + '_steps'` (piecewise)."""
    steps_key = key + "_steps"
    if steps_key in exo:
        try:
            pieces = [(d["t"], d["value"]) for d in exo[steps_key]]
        except (TypeError, KeyError) as e:
            raise ScenarioError(
                f"{steps_key} entries need 't' and 'value'") from e
        return Schedule(pieces)
    if key in exo:
        return Schedule.constant(exo[key])
    return None


# ----------------------------------------------------------------------
class Scenario:
    """Declarative description of one closed-loop experiment."""

    _SCENARIO_KEYS = {"name", "steps", "seed", "divergence_threshold", "x0"}

    def __init__(self, name, system, controller, steps, system_params=None,
                 x0=None, exogenous=None, seed=0,
                 divergence_threshold=1e6, base_dir="."):
        self.name = str(name)
        self.system = str(system)
        self.system_params = dict(system_params or {})
        self.controller = dict(controller)
        self.steps = int(steps)
        self.x0 = None if x0 is None else np.asarray(x0, float)
        self.exogenous = dict(exogenous or {})
        self.seed = int(seed)
        self.divergence_threshold = float(divergence_threshold)
        self.base_dir = base_dir
        if self.steps < 1:
            raise ScenarioError("a scenario needs at least one step")
        if not self.name or not all(ch.isalnum() or ch in "._-"
                                    for ch in self.name):
            raise ScenarioError("scenario names must be nonempty and use "
                                "only letters, digits, '.', '_', '-'")

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        try:
            sc_tab = dict(d.pop("scenario"))
            sys_tab = dict(d.pop("system"))
            ctrl_tab = dict(d.pop("controller"))
        except KeyError as e:
            raise ScenarioError(f"missing required table {e.args[0]!r}") \
                from None
        exo_tab = dict(d.pop("exogenous", {}))
        if d:
            raise ScenarioError(f"unknown top-level tables: {sorted(d)}")
        unknown = set(sc_tab) - cls._SCENARIO_KEYS
        if unknown:
            raise ScenarioError(f"unknown [scenario] keys: {sorted(unknown)}")
        try:
            name = sc_tab["name"]
            steps = sc_tab["steps"]
            system = sys_tab.pop("id")
        except KeyError as e:
            raise ScenarioError(f"missing required key {e.args[0]!r}") \
                from None
        return cls(name, system, ctrl_tab, steps, system_params=sys_tab,
                   x0=sc_tab.get("x0"), exogenous=exo_tab,
                   seed=sc_tab.get("seed", 0),
                   divergence_threshold=sc_tab.get("divergence_threshold",
                                                   1e6),
                   base_dir=base_dir)

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            try:
                data = tomli.load(fh)
            except tomli.TOMLDecodeError as e:
                raise ScenarioError(f"invalid scenario file {path}: {e}") \
                    from e
        return cls.from_dict(data, base_dir=os.path.dirname(
            os.path.abspath(path)))

    # ------------------------------------------------------------------
    def to_dict(self):
        sc = {"name": self.name, "steps": self.steps, "seed": self.seed,
              "divergence_threshold": self.divergence_threshold}
        if self.x0 is not None:
            sc["x0"] = [float(v) for v in self.x0]
        out = {"scenario": sc,
               "system": {"id": self.system, **self.system_params},
               "controller": dict(self.controller)}
        if self.exogenous:
            out["exogenous"] = dict(self.exogenous)
        return out

    def to_toml_str(self):
        return _dump_toml(self.to_dict())


# ----------------------------------------------------------------------
# minimal TOML writer for the scenario schema (scalars, lists, tables,
# and arrays of tables holding scalars/lists)
# ----------------------------------------------------------------------

def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        out = repr(float(v))
        return out if ("." in out or "e" in out or "n" in out) else out + ".0"
    if isinstance(v, str):
        esc = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{esc}"'
    if isinstance(v, np.ndarray):
        return _toml_value(v.tolist())
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(e) for e in v) + "]"
    raise ScenarioError(f"cannot serialize {type(v).__name__} to TOML")


def _dump_toml(data):
    lines = []
    for table, content in data.items():
        plain = {k: v for k, v in content.items()
                 if not (isinstance(v, list) and v
                         and isinstance(v[0], dict))}
        arrays = {k: v for k, v in content.items() if k not in plain}
        lines.append(f"[{table}]")
        for k, v in plain.items():
            lines.append(f"{k} = {_toml_value(v)}")
        for k, rows in arrays.items():
            for row in rows:
                lines.append("")
                lines.append(f"[[{table}.{k}]]")
                for rk, rv in row.items():
                    lines.append(f"{rk} = {_toml_value(rv)}")
        lines.append("")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# controller construction
# ----------------------------------------------------------------------

def _as_matrix(v):
    return np.atleast_2d(np.asarray(v, float))


def _equilibrium(sys, xr, ur):
    resid = float(np.max(np.abs(sys.f(xr, ur) - xr)))
    if resid > 1e-8:
        raise ScenarioError(
            f"(setpoint, input) is not an equilibrium (residual {resid:.2e})")


def _resolve_setpoint(sys, ctrl):
    xr = np.asarray(ctrl.pop("setpoint", np.zeros(sys.n)), float) \
        * np.ones(sys.n)
    if "input" in ctrl:
        ur = np.asarray(ctrl.pop("input"), float) * np.ones(sys.m)
    elif sys.is_linear:
        A, B, c, *_ = sys.linear_terms
        ur, *_ = np.linalg.lstsq(B, xr - A @ xr - c, rcond=None)
    else:
        raise ScenarioError("a nonlinear plant needs an explicit reference "
                            "'input' next to 'setpoint'")
    _equilibrium(sys, xr, ur)
    return xr, ur


def _load_ingredients(ctrl, base_dir):
    ing = ctrl.pop("ingredients", None)
    path = ctrl.pop("ingredients_file", None)
    if ing is not None and path is not None:
        raise ScenarioError("give either ingredients or ingredients_file")
    if path is not None:
        full = path if os.path.isabs(path) else os.path.join(base_dir, path)
        try:
            with open(full) as fh:
                ing = json.load(fh)
        except OSError as e:
            raise ScenarioError(f"cannot read ingredients file: {e}") from e
        except json.JSONDecodeError as e:
            raise ScenarioError(f"invalid ingredients JSON: {e}") from e
    if ing is None:
        return None
    if isinstance(ing, TerminalIngredients):
        return ing
    return TerminalIngredients.from_dict(ing)


def _tracking_weights(ctrl, bench):
    if "Q" in ctrl or "R" in ctrl:
        try:
            return _as_matrix(ctrl.pop("Q")), _as_matrix(ctrl.pop("R"))
        except KeyError as e:
            raise ScenarioError("give both Q and R or neither") from None
    if bench.stage.variant in ("quadratic", "output"):
        return bench.stage.Q, bench.stage.R
    track = bench.extras.get("tracking")
    if track is not None:
        return track.Q, track.R
    n, m = bench.sys.n, bench.sys.m
    return np.eye(n), np.eye(m)


def build_controller(scenario):
    """Resolve a scenario into (benchmark, spec, exo_fn, resolved dict).

    exo_fn(t) returns the exogenous dict apply_controller expects at step
    t (None for schemes that need nothing).  The resolved dict records
    every synthesized or computed quantity for the run manifest.
    """
    sc = scenario
    try:
        bench = get_benchmark(sc.system, **sc.system_params)
    except (ValueError, TypeError) as e:
        raise ScenarioError(f"system: {e}") from e
    sys = bench.sys
    ctrl = dict(sc.controller)
    exo = dict(sc.exogenous)
    resolved = {}

    try:
        scheme = ctrl.pop("scheme")
        N = int(ctrl.pop("N"))
    except KeyError as e:
        raise ScenarioError(f"controller needs key {e.args[0]!r}") from None
    if scheme == "trajectory-tracking":
        raise ScenarioError("trajectory-tracking runs are built "
                            "programmatically, not from scenario files")
    if scheme not in MpcProblemSpec.SCHEMES:
        raise ScenarioError(f"unknown scheme {scheme!r}")

    T = int(ctrl.pop("T", 1))
    M = int(ctrl.pop("M", 1))
    nu = int(ctrl.pop("nu", 1))
    beta = float(ctrl.pop("beta", 0.0))
    beta_adaptive = bool(ctrl.pop("beta_adaptive", False))
    alpha_min = float(ctrl.pop("alpha_min", 1e-8))
    shifted_terminal = bool(ctrl.pop("shifted_terminal", True))
    econ_mode = ctrl.pop("economic_terminal_mode", "equality")
    rollout = int(ctrl.pop("rollout_horizon", 0))
    terminal_mode = ctrl.pop("terminal", None)
    S = ctrl.pop("S", None)
    orbit_x = ctrl.pop("orbit_x", None)
    orbit_u = ctrl.pop("orbit_u", None)
    preset = _load_ingredients(ctrl, sc.base_dir)
    Qt, Rt = _tracking_weights(ctrl, bench)

    # exogenous schedules -------------------------------------------------
    y_d_sched = _parse_schedule(exo, "y_d")
    y_e_sched = _parse_schedule(exo, "y_e")
    y_d_period = _parse_schedule(exo, "y_d_period")
    y_e_period = _parse_schedule(exo, "y_e_period")
    if exo.pop("use_benchmark_price", False):
        price = bench.extras.get("price")
        if price is None:
            raise ScenarioError(
                f"benchmark {sc.system!r} has no price signal")
        if y_e_period is not None:
            raise ScenarioError("use_benchmark_price conflicts with "
                                "y_e_period")
        y_e_period = Schedule.constant(np.asarray(price.values))
    known_exo = {"y_d", "y_d_steps", "y_e", "y_e_steps", "y_d_period",
                 "y_d_period_steps", "y_e_period", "y_e_period_steps"}
    unknown = set(exo) - known_exo
    if unknown:
        raise ScenarioError(f"unknown [exogenous] keys: {sorted(unknown)}")

    def y_e_signal():
        """ExogenousSignal for schemes that read the parameter by time."""
        if y_e_period is not None:
            return ExogenousSignal.periodic_sequence(
                [np.asarray(v, float) for v in np.atleast_2d(
                    y_e_period.at(0))])
        if y_e_sched is not None:
            times = [float(t) for t in y_e_sched.starts]
            return ExogenousSignal(times, y_e_sched.values)
        return None

    signal = None
    zset = bench.zset
    ref = None
    terminal = None

    # reference and terminal ingredients ----------------------------------
    if scheme in ("stabilizing", "setpoint-tracking-artificial",
                  "periodic-tracking-artificial", "planner-tracker"):
        xr, ur = _resolve_setpoint(sys, ctrl)
        resolved["setpoint"] = xr.tolist()
        resolved["setpoint_input"] = ur.tolist()
        if scheme != "stabilizing" and T > 1:
            ref = Reference.periodic([xr] * T, [ur] * T)
        else:
            ref = Reference.setpoint(xr, ur)
        mode = terminal_mode or "synthesized"
        if preset is not None:
            terminal = preset
        elif mode == "synthesized":
            terminal = synth_terminal_setpoint(sys, (xr, ur), bench.zset,
                                               Qt, Rt)
        elif mode == "equality":
            terminal = terminal_equality((xr, ur), sys=sys)
        else:
            raise ScenarioError(f"scheme {scheme} cannot run with "
                                f"terminal = {mode!r}")
        if S is None and scheme != "stabilizing":
            S = 10.0 * np.eye(sys.p)
    elif scheme in ("economic", "economic-self-tuning"):
        signal = y_e_signal()
        y0 = None
        if scheme == "economic-self-tuning":
            if y_e_sched is None:
                raise ScenarioError("economic-self-tuning needs a y_e "
                                    "schedule")
            y0 = y_e_sched.at(0)
        elif signal is not None:
            y0 = signal.at(0)
        (xs, us), ss_val = optimal_steady_state(sys, bench.zset, bench.stage,
                                                param=y0)
        ref = Reference.setpoint(xs, us)
        resolved["steady_state"] = {"x": xs.tolist(), "u": us.tolist(),
                                    "cost": ss_val}
        mode = terminal_mode or ("equality" if scheme ==
                                 "economic-self-tuning" else "synthesized")
        if preset is not None:
            terminal = preset
        elif mode == "synthesized":
            track = synth_terminal_setpoint(sys, (xs, us), bench.zset,
                                            Qt, Rt)
            terminal = synth_terminal_economic(sys, (xs, us), bench.stage,
                                               track, bench.zset, param=y0)
            econ_mode = "synthesized"
        elif mode == "equality":
            terminal = terminal_equality((xs, us), sys=sys) \
                if scheme == "economic" else None
            econ_mode = "equality"
        else:
            raise ScenarioError(f"scheme {scheme} cannot run with "
                                f"terminal = {mode!r}")
    elif scheme in ("periodic-economic", "periodic-economic-artificial",
                    "periodicity-constrained"):
        if y_e_period is None and y_e_sched is None:
            raise ScenarioError(f"{scheme} needs a y_e schedule")
        signal = y_e_signal()
        if orbit_x is not None or orbit_u is not None:
            if orbit_x is None or orbit_u is None:
                raise ScenarioError("give both orbit_x and orbit_u")
            ref = Reference.periodic(orbit_x, orbit_u)
            if ref.period != T:
                raise ScenarioError("orbit length must equal the period T")
            resid = ref.check_dynamic_consistency(sys)
            if resid > 1e-8:
                raise ScenarioError("the initial orbit is not dynamically "
                                    f"consistent (residual {resid:.2e})")
        else:
            window0 = [signal.at(j) for j in range(T)]
            ref, orbit_val = optimal_periodic_reference(
                sys, bench.zset, bench.stage, T, y_e_seq=window0)
            resolved["orbit_cost_per_step"] = orbit_val
        resolved["orbit_x"] = ref.xs.tolist()
        resolved["orbit_u"] = ref.us.tolist()
        mode = terminal_mode or ("synthesized" if scheme ==
                                 "periodic-economic" else "equality")
        if preset is not None:
            terminal = preset
        elif mode == "synthesized":
            track = synth_terminal_trajectory(sys, ref, bench.zset, Qt, Rt)
            terminal = synth_terminal_economic_periodic(
                sys, ref, bench.stage, track, bench.zset, signal=signal)
            econ_mode = "synthesized"
        elif mode == "equality":
            terminal = terminal_equality(ref, sys=sys) \
                if scheme == "periodic-economic" else None
            econ_mode = "equality"
        else:
            raise ScenarioError(f"scheme {scheme} cannot run with "
                                f"terminal = {mode!r}")
        if scheme == "periodicity-constrained":
            terminal = None
    elif scheme == "unconstrained":
        zset = None
        if terminal_mode not in (None, "none"):
            raise ScenarioError("the unconstrained scheme runs without "
                                "terminal ingredients")
        xr, ur = _resolve_setpoint(sys, ctrl)
        ref = Reference.setpoint(xr, ur)
        resolved["setpoint"] = xr.tolist()
        resolved["setpoint_input"] = ur.tolist()
    else:  # pragma: no cover - scheme list is closed above
        raise ScenarioError(scheme)

    if ctrl:
        raise ScenarioError(f"unknown [controller] keys: {sorted(ctrl)}")

    if S is not None:
        S = float(S) * np.eye(sys.p) if np.isscalar(S) else _as_matrix(S)

    try:
        mpc = MpcProblemSpec(
            scheme, sys, N, zset=zset, stage=bench.stage, terminal=terminal,
            ref=ref, S=S, T=T, alpha_min=alpha_min, beta=beta,
            beta_adaptive=beta_adaptive, M=M, nu=nu, signal=signal,
            shifted_terminal=shifted_terminal,
            rollout_horizon=rollout, economic_terminal_mode=econ_mode)
    except ValueError as e:
        raise ScenarioError(f"controller: {e}") from e

    if terminal is not None:
        resolved["terminal"] = {"variant": terminal.variant,
                                "alpha": terminal.alpha}

    # exogenous assembly per scheme ---------------------------------------
    if scheme == "setpoint-tracking-artificial":
        if y_d_sched is None:
            raise ScenarioError("setpoint tracking needs a y_d schedule")
        exo_fn = lambda t: {"y_d": y_d_sched.at(t)}
    elif scheme in ("periodic-tracking-artificial", "planner-tracker"):
        if y_d_period is None:
            raise ScenarioError(f"{scheme} needs a y_d_period schedule")
        exo_fn = lambda t: {"y_d_seq": y_d_period.window(t, T)}
    elif scheme == "economic-self-tuning":
        exo_fn = lambda t: {"y_e": y_e_sched.at(t),
                            "y_e_next": y_e_sched.at(t + 1)}
    elif scheme == "periodic-economic-artificial":
        sched = y_e_period
        if sched is None:
            raise ScenarioError(f"{scheme} needs a y_e_period schedule")
        exo_fn = lambda t: {"y_e_seq": sched.window(t, T),
                            "y_e_seq_next": sched.window(t + 1, T)}
    elif scheme == "periodicity-constrained":
        if y_e_period is None:
            raise ScenarioError(f"{scheme} needs a y_e_period schedule")
        exo_fn = lambda t: {"y_e_seq": y_e_period.window(t, T)}
    else:
        exo_fn = None

    return bench, mpc, exo_fn, resolved


# ----------------------------------------------------------------------
# trace
# ----------------------------------------------------------------------

class ClosedLoopTrace:
    """Per-step closed-loop records plus exactly recomputable metrics.

    Row k holds the state x[k] before input u[k] was applied, the stage
    cost ell[k] of that pair, and the diagnostics of the optimization
    that produced u[k] (value, alpha, kappa, beta, feasible, iterations;
    repeated across the block when one solve supplies nu > 1 inputs, with
    ``solved`` marking the first row of each block).  x has one extra
    final row.  ``status`` is completed | infeasible | diverged, with
    ``reason`` set when the run was truncated.
    """

    FLOAT_COLS = ("ell", "value", "alpha", "kappa", "beta")
    INT_COLS = ("t", "feasible", "iterations", "solved")

    def __init__(self, t, x, u, ell, value, alpha, kappa, beta, feasible,
                 iterations, solved, wall=None, status="completed",
                 reason=None, name=""):
        self.t = np.asarray(t, int)
        self.x = np.atleast_2d(np.asarray(x, float))
        self.u = np.atleast_2d(np.asarray(u, float))
        self.ell = np.asarray(ell, float)
        self.value = np.asarray(value, float)
        self.alpha = np.asarray(alpha, float)
        self.kappa = np.asarray(kappa, float)
        self.beta = np.asarray(beta, float)
        self.feasible = np.asarray(feasible, bool)
        self.iterations = np.asarray(iterations, int)
        self.solved = np.asarray(solved, bool)
        self.wall = None if wall is None else np.asarray(wall, float)
        self.status = status
        self.reason = reason
        self.name = name
        if self.x.shape[0] != self.steps + 1:
            raise ValueError("x must hold one more row than there are steps")

    @property
    def steps(self):
        return self.u.shape[0]

    # ------------------------------------------------------------------
    @property
    def J_cl(self):
        """Truncated closed-loop cost: the sum of recorded stage costs."""
        return float(np.sum(self.ell))

    def running_average(self):
        """Cumulative mean of the stage cost after each step."""
        return np.cumsum(self.ell) / np.arange(1, self.steps + 1)

    def lyapunov_diffs(self):
        """Differences of consecutive optimal values (solve rows only)."""
        vals = self.value[self.solved]
        return np.diff(vals)

    def tracking_errors(self, target):
        """Euclidean distance of each visited state from target.

        target: one state vector, or an array with one row per step
        (steps + 1 rows to cover the final state).
        """
        target = np.atleast_2d(np.asarray(target, float))
        if target.shape[0] == 1:
            target = np.repeat(target, self.x.shape[0], axis=0)
        rows = min(self.x.shape[0], target.shape[0])
        return np.linalg.norm(self.x[:rows] - target[:rows], axis=1)

    def metrics(self):
        """Scalar summary; every entry derives only from recorded rows."""
        out = {
            "steps": int(self.steps),
            "status": self.status,
            "J_cl": self.J_cl,
            "avg_cost": self.J_cl / self.steps,
            "final_state_norm": float(np.linalg.norm(self.x[-1])),
            "max_lyapunov_increase": (
                float(np.max(self.lyapunov_diffs()))
                if np.count_nonzero(self.solved) > 1 else 0.0),
            "solves": int(np.count_nonzero(self.solved)),
            "iterations_total": int(np.sum(
                self.iterations[self.solved])),
            "all_feasible": bool(np.all(self.feasible)),
        }
        if self.reason is not None:
            out["reason"] = self.reason
        return out

    # ------------------------------------------------------------------
    def to_csv(self):
        """Deterministic CSV text (wall-clock column deliberately absent)."""
        n = self.x.shape[1]
        m = self.u.shape[1]
        head = (f"# dynmpc-trace v1 name={self.name or '-'} "
                f"status={self.status} steps={self.steps} n={n} m={m}")
        cols = (["t"] + [f"x{i}" for i in range(n)]
                + [f"u{j}" for j in range(m)]
                + list(self.FLOAT_COLS) + ["feasible", "iterations",
                                           "solved"])
        lines = [head]
        if self.reason:
            lines.append(f"# reason: {self.reason}")
        lines.append(",".join(cols))
        for k in range(self.steps):
            row = [str(int(self.t[k]))]
            row += [_g17(v) for v in self.x[k]]
            row += [_g17(v) for v in self.u[k]]
            row += [_g17(getattr(self, c)[k]) for c in self.FLOAT_COLS]
            row += [str(int(self.feasible[k])), str(int(self.iterations[k])),
                    str(int(self.solved[k]))]
            lines.append(",".join(row))
        # final state row: t of the state, x, blanks elsewhere
        tail = [str(int(self.t[-1]) + 1 if self.steps else 0)]
        tail += [_g17(v) for v in self.x[-1]]
        tail += [""] * (m + len(self.FLOAT_COLS) + 3)
        lines.append(",".join(tail))
        return "\n".join(lines) + "\n"

    def save(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def from_csv(cls, text_or_path):
        if "\n" not in str(text_or_path) and os.path.exists(text_or_path):
            with open(text_or_path) as fh:
                text = fh.read()
        else:
            text = str(text_or_path)
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# dynmpc-trace v1"):
            raise ValueError("not a dynmpc trace file")
        meta = dict(part.split("=", 1) for part in lines[0][2:].split()[2:])
        n = int(meta["n"])
        m = int(meta["m"])
        status = meta["status"]
        name = meta.get("name", "-")
        name = "" if name == "-" else name
        reason = None
        body_start = 1
        if lines[1].startswith("# reason: "):
            reason = lines[1][len("# reason: "):]
            body_start = 2
        body = lines[body_start + 1:]
        *rows, last = body
        t, x, u = [], [], []
        floats = {c: [] for c in cls.FLOAT_COLS}
        feas, iters, solved = [], [], []
        for ln in rows:
            parts = ln.split(",")
            t.append(int(parts[0]))
            x.append([float(v) for v in parts[1:1 + n]])
            u.append([float(v) for v in parts[1 + n:1 + n + m]])
            off = 1 + n + m
            for j, c in enumerate(cls.FLOAT_COLS):
                floats[c].append(float(parts[off + j]))
            off += len(cls.FLOAT_COLS)
            feas.append(bool(int(parts[off])))
            iters.append(int(parts[off + 1]))
            solved.append(bool(int(parts[off + 2])))
        x.append([float(v) for v in last.split(",")[1:1 + n]])
        return cls(t, x, np.asarray(u, float).reshape(len(rows), m),
                   floats["ell"], floats["value"], floats["alpha"],
                   floats["kappa"], floats["beta"], feas, iters, solved,
                   status=status, reason=reason, name=name)


def _g17(v):
    """Shortest decimal that round-trips a float64 exactly."""
    v = float(v)
    s = repr(v)
    return s if float(s) == v or not math.isfinite(v) else f"{v:.17g}"


# ----------------------------------------------------------------------
# closed loop
# ----------------------------------------------------------------------

def run_closed_loop(spec, x0, steps, exo_fn=None, divergence_threshold=1e6,
                    t0=0, name="", ell_ref=None):
    """Simulate `steps` plant steps of spec's controller from x0.

    exo_fn(t) supplies the exogenous dict for the solve at step t.  The
    stage-cost column uses, in this order: the economic stage cost with
    the parameter active at each step, the quadratic stage cost around
    the solution's own artificial reference point, or the cost around
    ``ell_ref`` / spec.ref.  An infeasible initial solve raises
    ScenarioError; later infeasibility or a state-norm blowup truncates
    the trace with a reason.
    """
    sys = spec.sys
    x = np.asarray(x0, float).copy()
    if x.shape != (sys.n,):
        raise ScenarioError(f"x0 must have shape ({sys.n},)")
    state = ControllerState(spec, t0)
    rows = {k: [] for k in ("t", "u", "ell", "value", "alpha", "kappa",
                            "beta", "feasible", "iterations", "solved",
                            "wall")}
    xs = [x.copy()]
    status, reason = "completed", None
    ref = ell_ref if ell_ref is not None else spec.ref
    econ = spec.stage is not None and spec.stage.variant == "economic"

    def stage_value(t, xk, uk, sol):
        if spec.stage is None:
            return math.nan
        if econ:
            param = None
            if exo_fn is not None:
                e = exo_fn(t) or {}
                if "y_e" in e:
                    param = e["y_e"]
                elif "y_e_seq" in e:
                    param = e["y_e_seq"][0]
            if param is None and spec.signal is not None:
                param = spec.signal.at(t)
            return spec.stage.value(xk, uk, param=param)
        if sol is not None and getattr(sol, "r_seq", None) is not None:
            r = np.asarray(sol.r_seq, float)
            r0 = r[t % r.shape[0]] if spec.T > 1 else r[0]
            return spec.stage.value(xk, uk, ref=(r0[:sys.n], r0[sys.n:]))
        if ref is not None:
            return spec.stage.value(xk, uk, ref=ref.at(t))
        return spec.stage.value(xk, uk)

    done = 0
    while done < steps:
        exo = exo_fn(state.t) if exo_fn is not None else None
        tic = time.perf_counter()
        try:
            u_block, sol, diag = apply_controller(state, x, exo=exo)
        except InfeasibleProblem as e:
            if done == 0:
                raise ScenarioError(
                    f"scenario {name or '?'}: infeasible at the initial "
                    f"state: {e}") from e
            status, reason = "infeasible", f"step {done}: {e}"
            break
        wall = time.perf_counter() - tic
        t_solve = diag["t"]
        blown = False
        for i, ui in enumerate(u_block):
            if done >= steps:
                break
            tk = t_solve + i
            ell_k = stage_value(tk, x, ui, sol)
            rows["t"].append(tk)
            rows["u"].append(np.asarray(ui, float))
            rows["ell"].append(ell_k)
            rows["value"].append(diag["value"])
            rows["alpha"].append(math.nan if diag["alpha"] is None
                                 else float(diag["alpha"]))
            rows["kappa"].append(float(diag["kappa"]))
            rows["beta"].append(float(diag["beta"]))
            rows["feasible"].append(bool(diag["feasible"]))
            rows["iterations"].append(int(diag["iterations"]))
            rows["solved"].append(i == 0)
            rows["wall"].append(wall if i == 0 else 0.0)
            x = sys.f(x, ui)
            xs.append(x.copy())
            done += 1
            if not np.all(np.isfinite(x)) or \
                    np.linalg.norm(x) > divergence_threshold:
                status = "diverged"
                reason = (f"step {done}: |x| = {np.linalg.norm(x):.3e} "
                          f"exceeded {divergence_threshold:.3e}")
                blown = True
                break
        if blown:
            break

    return ClosedLoopTrace(
        rows["t"], xs, np.asarray(rows["u"], float).reshape(done, sys.m),
        rows["ell"], rows["value"], rows["alpha"], rows["kappa"],
        rows["beta"], rows["feasible"], rows["iterations"], rows["solved"],
        wall=rows["wall"], status=status, reason=reason, name=name)


def run_scenario(scenario):
    """Build the scenario's controller and run it; returns (trace, manifest).

    The manifest is a JSON-ready dict with the fully resolved
    configuration: the scenario as parsed, everything the builder
    computed (references, terminal data), and the outcome metrics.
    """
    bench, spec, exo_fn, resolved = build_controller(scenario)
    x0 = scenario.x0 if scenario.x0 is not None else bench.x0
    if np.asarray(x0, float).shape != (bench.sys.n,):
        raise ScenarioError(f"x0 must have shape ({bench.sys.n},)")
    trace = run_closed_loop(
        spec, x0, scenario.steps, exo_fn=exo_fn,
        divergence_threshold=scenario.divergence_threshold,
        name=scenario.name)
    manifest = {
        "scenario": _jsonable(scenario.to_dict()),
        "resolved": _jsonable(resolved),
        "x0": [float(v) for v in np.asarray(x0, float)],
        "metrics": _jsonable(trace.metrics()),
    }
    return trace, manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


# ----------------------------------------------------------------------
# comparisons and batches
# ----------------------------------------------------------------------

class CompareReport:
    """Outcome of one metric comparison between two traces."""

    def __init__(self, metric, value_a, value_b, verdict):
        self.metric = metric
        self.value_a = float(value_a)
        self.value_b = float(value_b)
        self.gap = self.value_a - self.value_b
        self.verdict = verdict

    def __repr__(self):
        return (f"CompareReport({self.metric}: a={self.value_a:.6g} "
                f"b={self.value_b:.6g} -> {self.verdict})")


_COMPARE_METRICS = ("J_cl", "avg_cost", "tail_avg")


def compare_traces(a, b, metric="J_cl", window=None, target=None):
    """Compare two aligned traces on one scalar metric (lower is better).

    tail_avg averages the stage cost over the final `window` steps
    (default: the final quarter).  With `target` set, metric may also be
    "tracking_rms": the root-mean-square distance of the visited states
    from the target.
    """
    if a.steps != b.steps:
        raise ValueError("traces must have the same number of steps "
                         f"({a.steps} vs {b.steps})")
    if metric == "tracking_rms":
        if target is None:
            raise ValueError("tracking_rms needs a target")
        va = float(np.sqrt(np.mean(a.tracking_errors(target) ** 2)))
        vb = float(np.sqrt(np.mean(b.tracking_errors(target) ** 2)))
    elif metric == "J_cl":
        va, vb = a.J_cl, b.J_cl
    elif metric == "avg_cost":
        va, vb = a.J_cl / a.steps, b.J_cl / b.steps
    elif metric == "tail_avg":
        w = int(window) if window is not None else max(1, a.steps // 4)
        if not 1 <= w <= a.steps:
            raise ValueError("window must lie in [1, steps]")
        va = float(np.mean(a.ell[-w:]))
        vb = float(np.mean(b.ell[-w:]))
    else:
        raise ValueError(f"unknown metric {metric!r}; choose from "
                         f"{_COMPARE_METRICS + ('tracking_rms',)}")
    verdict = "a" if va < vb else ("b" if vb < va else "tie")
    return CompareReport(metric, va, vb, verdict)


def run_batch(scenarios, out_dir=None):
    """Run scenarios in order; returns {name: manifest}.

    With out_dir set, writes one trace CSV per scenario plus a
    ``summary.json`` (sorted keys) holding every manifest.  Scenario
    errors are recorded, not raised, so one bad entry cannot take down
    the batch.
    """
    summary = {}
    for sc in scenarios:
        if sc.name in summary:
            raise ValueError(f"duplicate scenario name {sc.name!r}")
        try:
            trace, manifest = run_scenario(sc)
        except ScenarioError as e:
            summary[sc.name] = {"scenario": sc.to_dict(),
                                "error": str(e)}
            continue
        summary[sc.name] = manifest
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            trace.save(os.path.join(out_dir, f"{sc.name}.csv"))
    if out_dir is not None:
        atomic_write_text(
            os.path.join(out_dir, "summary.json"),
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
