"""Property checks over reach results and counterexample search by simulation."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as E
from .automaton import ClosedLoop
from .expr import Constraint
from .interval import Interval
from .neural import eval_network
from .reach import ReachResult, _out_names

VERIFIED, FALSIFIED, UNKNOWN = "Verified", "Falsified", "Unknown"


# ---------------------------------------------------------------------------
# Exact simulation
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    states: list[dict[str, float]]          # states[0] is the start
    inputs: list[dict[str, float]] = field(default_factory=list)
    actions: list[int | None] = field(default_factory=list)
    exit_step: int | None = None
    mode: str = ""

    def __len__(self):
        return len(self.inputs)


def _controller_inputs(loop: ClosedLoop, state: dict[str, float]):
    nn = loop.network
    y = [float(E.evaluate(w, state)) for w in loop.wiring]
    out = eval_network(nn, np.array(y))
    if loop.discrete:
        a = int(np.argmax(out))
        return dict(loop.actions[a]), a
    env = dict(zip(_out_names(loop.controller), (float(o) for o in out)))
    return {n: float(E.evaluate(e, env)) for n, e in loop.control.items()}, None


def simulate(loop: ClosedLoop, x0: dict[str, float], steps: int) -> Trace:
    """Run the closed loop from a point, mirroring the reach semantics.

    Each control step evaluates the network, advances the plant by one
    period, clamps, then takes the first enabled exit (ending the run).
    """
    plant = loop.plant
    if loop.network is None:
        raise ValueError("simulation needs the controller's network")
    state = {v: float(x0.get(v, plant.initial_set.get(v, Interval(0.0)).lo)) for v in plant.variables}
    mode = plant.initial_mode
    tr = Trace([dict(state)], mode=mode)
    for k in range(steps):
        m = plant.modes[mode]
        if m.kind == "idle":
            break
        inputs, action = _controller_inputs(loop, state)
        sched = loop.scheduling
        if m.kind == "discrete_map":
            for _ in range(sched.period):
                env = {**state, **inputs}
                state = {v: float(E.evaluate(m.flow[v], env)) if v in m.flow else state[v]
                         for v in plant.variables}
                state = _clamp(state, plant.saturations(mode))
        else:
            dt = sched.sample_time if sched.sample_time is not None else 1.0
            state = _rk4(m.flow, state, inputs, dt)
            state = _clamp(state, plant.saturations(mode))
        tr.inputs.append(inputs)
        tr.actions.append(action)
        for t in plant.exits(mode):
            if all(_holds(c, state) for c in t.guard):
                env = dict(state)
                state = {**state, **{v: float(E.evaluate(e, env)) for v, e in t.reset.items()}}
                mode = t.dst
                tr.exit_step = k + 1
                break
        tr.states.append(dict(state))
        tr.mode = mode
        if tr.exit_step is not None:
            break
    return tr


def _clamp(state, saturations):
    out = dict(state)
    for var, op, c in saturations:
        if (op == ">=" and out[var] >= c) or (op == "<=" and out[var] <= c):
            out[var] = c
    return out


def _rk4(flow, state, inputs, dt, substeps: int = 16):
    h = dt / substeps
    x = dict(state)

    def f(s):
        env = {**s, **inputs}
        return {v: float(E.evaluate(flow[v], env)) for v in flow}

    for _ in range(substeps):
        k1 = f(x)
        k2 = f({v: x[v] + h / 2 * k1[v] for v in x})
        k3 = f({v: x[v] + h / 2 * k2[v] for v in x})
        k4 = f({v: x[v] + h * k3[v] for v in x})
        x = {v: x[v] + h / 6 * (k1[v] + 2 * k2[v] + 2 * k3[v] + k4[v]) for v in x}
    return x


def _holds(c: Constraint, state) -> bool:
    return c.holds(float(E.evaluate(c.expr, state)))


# ---------------------------------------------------------------------------
# Properties and verdicts
# ---------------------------------------------------------------------------


@dataclass
class Property:
    """What must hold of every execution.

    ``safety`` is checked at every step, ``terminal`` at the last one.  With
    a ``goal`` mode every execution must enter it within ``max_steps``, and
    with ``min_reward`` the variable ``reward_var`` must then be at least
    that (ties count as satisfied).
    """

    max_steps: int
    safety: tuple[Constraint, ...] = ()
    terminal: tuple[Constraint, ...] = ()
    goal: str | None = None
    min_reward: float | None = None
    reward_var: str = "r"

    def variables(self) -> set[str]:
        out = set()
        for c in self.safety + self.terminal:
            out |= E.free_vars(c.expr)
        if self.min_reward is not None:
            out.add(self.reward_var)
        return out


def mountain_car_property(min_reward: float = 90.0, max_steps: int = 110) -> Property:
    return Property(max_steps, goal="goal", min_reward=min_reward)


def quadrotor_property(bound: float = 0.32, steps: int = 30) -> Property:
    safety = []
    for v in ("px", "py", "pz"):
        safety += [Constraint(E.Var(v), "<=", bound), Constraint(E.Var(v), ">=", -bound)]
    return Property(steps, tuple(safety))


@dataclass
class Verdict:
    status: str
    steps_bound: int | None = None
    reward_bound: float | None = None
    reason: str = ""
    step: int | None = None
    counterexample: "Counterexample | None" = None

    def __str__(self):
        parts = [self.status]
        if self.reward_bound is not None:
            parts.append(f"reward >= {self.reward_bound:.4f}")
        if self.steps_bound is not None:
            parts.append(f"steps <= {self.steps_bound}")
        if self.reason:
            parts.append(self.reason)
        return ", ".join(parts)


def _sat(c: Constraint, iv: Interval) -> str:
    """'yes', 'no' or 'maybe' for an interval against one constraint."""
    if c.op == ">=":
        return "yes" if iv.lo >= c.bound else ("no" if iv.hi < c.bound else "maybe")
    if c.op == "<=":
        return "yes" if iv.hi <= c.bound else ("no" if iv.lo > c.bound else "maybe")
    if iv.lo == iv.hi == c.bound:
        return "yes"
    return "maybe" if iv.lo <= c.bound <= iv.hi else "no"


def _bound_of(c: Constraint, bounds: dict[str, Interval]) -> Interval:
    r = E.evaluate(c.expr, bounds)
    return Interval.coerce(r)


def check_property(result: ReachResult, prop: Property) -> Verdict:
    """Verdict from flowpipe bounds alone (sound, possibly inconclusive)."""
    leaves = result.leaves()
    for leaf in leaves:
        if leaf.status != "completed":
            last = leaf.trace()[-1].step if leaf.trace() else 0
            return Verdict(UNKNOWN, reason=f"{leaf.status}: {leaf.reason}", step=last)
    steps_bound = 0
    reward_bound = math.inf
    for leaf in leaves:
        trace = leaf.trace()
        for fp in trace:
            for c in prop.safety:
                s = _sat(c, _bound_of(c, fp.bounds))
                if s != "yes":
                    return Verdict(UNKNOWN, reason=f"safety {c} {'violated' if s == 'no' else 'straddled'}"
                                   f" by flowpipe", step=fp.step)
        if prop.terminal:
            for c in prop.terminal:
                s = _sat(c, _bound_of(c, trace[-1].bounds))
                if s != "yes":
                    return Verdict(UNKNOWN, reason=f"terminal {c} not established", step=trace[-1].step)
        if prop.goal is not None:
            exits = [x for x in leaf.all_exits() if x.dst == prop.goal]
            full = [x for x in exits if x.full]
            if not full or full[0].step > prop.max_steps:
                return Verdict(UNKNOWN, reason=f"goal not certainly reached within {prop.max_steps} steps",
                               step=trace[-1].step)
            steps_bound = max(steps_bound, full[0].step)
            if prop.min_reward is not None:
                # every execution leaves through one of these exits
                lo = min(x.bounds[prop.reward_var].lo for x in exits if x.step <= full[0].step)
                reward_bound = min(reward_bound, lo)
        else:
            steps_bound = max(steps_bound, trace[-1].step)
    if prop.min_reward is not None:
        if reward_bound < prop.min_reward:
            return Verdict(UNKNOWN, steps_bound, reward_bound,
                           reason=f"reward lower bound {reward_bound:.4f} below {prop.min_reward}")
        return Verdict(VERIFIED, steps_bound, reward_bound)
    return Verdict(VERIFIED, steps_bound)


# ---------------------------------------------------------------------------
# Falsification
# ---------------------------------------------------------------------------


@dataclass
class Counterexample:
    x0: dict[str, float]
    trace: Trace
    violated: str
    step: int
    reward: float | None = None


def violation(trace: Trace, prop: Property):
    """(description, step) of the first violation along a trace, or None."""
    for k, s in enumerate(trace.states):
        for c in prop.safety:
            if not _holds(c, s):
                return f"safety {c}", k
    last = trace.states[-1]
    for c in prop.terminal:
        if not _holds(c, last):
            return f"terminal {c}", len(trace.states) - 1
    if prop.goal is not None:
        if trace.exit_step is None or trace.mode != prop.goal or trace.exit_step > prop.max_steps:
            return f"mode {prop.goal!r} not reached within {prop.max_steps} steps", len(trace.states) - 1
        if prop.min_reward is not None and last[prop.reward_var] < prop.min_reward:
            return f"reward {last[prop.reward_var]:.4f} < {prop.min_reward}", trace.exit_step
    elif prop.min_reward is not None and last[prop.reward_var] < prop.min_reward:
        return f"reward {last[prop.reward_var]:.4f} < {prop.min_reward}", len(trace.states) - 1
    return None


def _corners(box: dict[str, Interval]):
    keys = list(box)
    for combo in itertools.product(*[sorted({box[k].lo, box[k].hi}) for k in keys]):
        yield dict(zip(keys, combo))


def sample_points(box: dict[str, Interval], n: int, seed: int = 0, corner_first: bool = True):
    """Corners (optionally) then seeded uniform samples, ``n`` points in all."""
    box = {k: Interval.coerce(v) for k, v in box.items()}
    count = 0
    if corner_first:
        for c in _corners(box):
            if count >= n:
                return
            yield c
            count += 1
    rng = np.random.default_rng(seed)
    keys = list(box)
    while count < n:
        yield {k: float(rng.uniform(box[k].lo, box[k].hi)) if box[k].hi > box[k].lo else box[k].lo
               for k in keys}
        count += 1


def falsify_by_simulation(loop: ClosedLoop, box: dict[str, Interval], prop: Property,
                          n_samples: int = 1000, corner_first: bool = True, seed: int = 0):
    """First simulated execution that violates ``prop``, or None.

    Finding none proves nothing.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    for x0 in sample_points(box, n_samples, seed, corner_first):
        tr = simulate(loop, x0, prop.max_steps)
        bad = violation(tr, prop)
        if bad is not None:
            rv = tr.states[-1].get(prop.reward_var)
            return Counterexample(dict(x0), tr, bad[0], bad[1], rv)
    return None


def replay(loop: ClosedLoop, cex: Counterexample, prop: Property) -> Trace:
    return simulate(loop, cex.x0, prop.max_steps)


def counterexample_csv(cex: Counterexample) -> str:
    """Start point (exact decimal) and one row per step of the trace."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    tr = cex.trace
    svars = list(tr.states[0])
    ivars = list(tr.inputs[0]) if tr.inputs else []
    w.writerow(["# violated", cex.violated, "step", cex.step])
    w.writerow(["# start"] + [f"{k}={float(v)!r}" for k, v in cex.x0.items()])
    w.writerow(["step"] + svars + ivars + ["action"])
    for k, s in enumerate(tr.states):
        inp = tr.inputs[k] if k < len(tr.inputs) else {}
        act = tr.actions[k] if k < len(tr.actions) else None
        w.writerow([k] + [repr(s[v]) for v in svars] + [repr(inp[v]) if v in inp else "" for v in ivars]
                   + ["" if act is None else act])
    return buf.getvalue()


def read_counterexample_start(text: str) -> dict[str, float]:
    for row in csv.reader(io.StringIO(text)):
        if row and row[0] == "# start":
            return {k: float(v) for k, v in (x.split("=", 1) for x in row[1:])}
    raise ValueError("no start row in counterexample")
