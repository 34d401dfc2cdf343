"""Hybrid automata and the controller/plant closed loop.

A mode carries either an ODE right-hand side or a discrete next-state map per
variable.  Saturation of a plant variable is written as a self-transition
whose guard crosses a constant and whose reset pins the variable to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from . import expr as E
from .config import ConfigError, format_config, parse_config, split_list, subkeys
from .expr import Constraint, Diagnostic, Expr
from .interval import Interval

MODE_KINDS = ("ode", "discrete_map", "idle")


class WiringArityMismatch(ValueError):
    pass


class NamespaceCollision(ValueError):
    pass


@dataclass(frozen=True)
class UnknownMode(Diagnostic):
    pass


@dataclass(frozen=True)
class DuplicateMode(Diagnostic):
    pass


@dataclass(frozen=True)
class FlowCoverage(Diagnostic):
    pass


@dataclass(frozen=True)
class BadModeKind(Diagnostic):
    pass


@dataclass(frozen=True)
class BadInitialSet(Diagnostic):
    pass


@dataclass(frozen=True)
class Mode:
    name: str
    kind: str
    flow: Mapping[str, Expr]
    invariant: tuple[Constraint, ...] = ()


@dataclass(frozen=True)
class Transition:
    src: str
    dst: str
    guard: tuple[Constraint, ...] = ()
    reset: Mapping[str, Expr] = field(default_factory=dict)

    def saturation(self):
        """(var, op, bound) if this is a clamping self-transition, else None."""
        if self.src != self.dst or len(self.guard) != 1 or len(self.reset) != 1:
            return None
        g = self.guard[0]
        (var, val), = self.reset.items()
        if not isinstance(g.expr, E.Var) or g.expr.name != var:
            return None
        if g.op not in ("<=", ">=") or not isinstance(val, E.Const) or val.value != g.bound:
            return None
        return var, g.op, g.bound


@dataclass
class HybridAutomaton:
    """Modes, transitions and an initial condition over named variables.

    ``inputs`` lists names driven from outside: for a plant these are control
    symbols read by the flows, for a controller they are the state variables
    loaded with the measurement.  ``observations`` is the output map.
    """

    variables: list[str]
    modes: dict[str, Mode]
    transitions: list[Transition]
    initial_mode: str
    initial_set: dict[str, Interval] = field(default_factory=dict)
    observations: list[Expr] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    name: str = "automaton"
    source: object = None  # e.g. the network a controller was built from

    def mode(self, name: str) -> Mode:
        return self.modes[name]

    def outgoing(self, mode: str) -> list[Transition]:
        return [t for t in self.transitions if t.src == mode]

    def saturations(self, mode: str) -> list[tuple[str, str, float]]:
        return [s for t in self.outgoing(mode) if (s := t.saturation()) is not None]

    def exits(self, mode: str) -> list[Transition]:
        return [t for t in self.outgoing(mode) if t.saturation() is None]

    def __repr__(self):
        return (f"HybridAutomaton({self.name!r}, modes={list(self.modes)}, "
                f"vars={len(self.variables)})")


def validate_automaton(h: HybridAutomaton) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    names = [m.name for m in h.modes.values()]
    for n in sorted({n for n in names if names.count(n) > 1}):
        diags.append(DuplicateMode(n))
    for key, m in h.modes.items():
        if key != m.name:
            diags.append(DuplicateMode(key))
    if h.initial_mode not in h.modes:
        diags.append(UnknownMode(h.initial_mode))
    variables = list(h.variables)
    declared = set(variables) | set(h.inputs)
    for m in h.modes.values():
        if m.kind not in MODE_KINDS:
            diags.append(BadModeKind(m.name))
        if m.kind != "idle" and set(m.flow) != set(variables):
            diags.append(FlowCoverage(m.name))
        for v, f in m.flow.items():
            diags += E.validate(f, declared, variables, where=f"{m.name}.{v}",
                                ode_rhs=m.kind == "ode", ranges=_ranges(h))
        for c in m.invariant:
            diags += E.validate(c.expr, declared, variables, where=f"{m.name}.invariant")
    for i, t in enumerate(h.transitions):
        for end in (t.src, t.dst):
            if end not in h.modes:
                diags.append(UnknownMode(end))
        for c in t.guard:
            diags += E.validate(c.expr, declared, variables, where=f"transition {i} guard")
        for v, r in t.reset.items():
            if v not in variables:
                diags.append(E.UndeclaredVariable(f"transition {i} reset", v))
            diags += E.validate(r, declared, variables, where=f"transition {i} reset {v}")
    for v in h.initial_set:
        if v not in declared:
            diags.append(BadInitialSet(v))
    for o in h.observations:
        diags += E.validate(o, declared, variables, where="observation")
    return diags


def _ranges(h: HybridAutomaton):
    if all(v in h.initial_set for v in h.variables):
        return dict(h.initial_set)
    return None


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scheduling:
    """Plant advance per control evaluation.

    ``period`` discrete-map steps, or (for ODE plants) a zero-order hold over
    ``sample_time`` time units.
    """

    period: int = 1
    sample_time: float | None = None


@dataclass
class ClosedLoop:
    controller: HybridAutomaton
    plant: HybridAutomaton
    wiring: list[Expr]
    control: dict[str, Expr]
    scheduling: Scheduling = Scheduling()
    actions: list[dict[str, float]] | None = None

    @property
    def discrete(self) -> bool:
        return self.actions is not None

    @property
    def network(self):
        return self.controller.source


def compose_closed_loop(
    controller: HybridAutomaton,
    plant: HybridAutomaton,
    wiring: list[Expr] | None = None,
    scheduling: Scheduling | None = None,
    control: Mapping[str, Expr] | None = None,
    actions: list[dict[str, float]] | None = None,
) -> ClosedLoop:
    """Wire a controller automaton to a plant.

    ``wiring`` defaults to the plant observations and feeds the controller
    inputs.  Continuous control maps each plant input to an expression over
    the controller outputs (default: outputs in order).  With ``actions`` the
    controller is a classifier: the plant inputs are set from the row of the
    arg-max output.
    """
    wiring = list(plant.observations if wiring is None else wiring)
    wiring = [E.parse(w) if isinstance(w, str) else w for w in wiring]
    if len(wiring) != len(controller.inputs):
        raise WiringArityMismatch(
            f"controller takes {len(controller.inputs)} inputs, wiring has {len(wiring)}")
    clash = set(controller.variables) & set(plant.variables)
    if clash:
        raise NamespaceCollision(f"shared variable names: {sorted(clash)}")
    for w in wiring:
        bad = E.free_vars(w) - set(plant.variables)
        if bad:
            raise WiringArityMismatch(f"wiring reads non-plant names {sorted(bad)}")
    if actions is not None:
        if len(actions) != len(controller.observations):
            raise WiringArityMismatch(
                f"{len(actions)} actions for {len(controller.observations)} controller outputs")
        for a in actions:
            if set(a) != set(plant.inputs):
                raise WiringArityMismatch(f"action {a} does not set plant inputs {plant.inputs}")
        ctl: dict[str, Expr] = {}
    else:
        if control is None:
            if len(plant.inputs) != len(controller.observations):
                raise WiringArityMismatch(
                    f"plant has {len(plant.inputs)} inputs, controller {len(controller.observations)} outputs")
            ctl = dict(zip(plant.inputs, controller.observations))
        else:
            ctl = {k: E.parse(v) if isinstance(v, str) else v for k, v in control.items()}
            if set(ctl) != set(plant.inputs):
                raise WiringArityMismatch(f"control must set exactly {plant.inputs}")
    for a in (controller, plant):
        d = validate_automaton(a)
        if d:
            raise ValueError(f"{a.name} does not validate: {[str(x) for x in d]}")
    return ClosedLoop(controller, plant, wiring, ctl, scheduling or Scheduling(), actions)


# ---------------------------------------------------------------------------
# Text form (shares the config format)
# ---------------------------------------------------------------------------


def _iv(iv: Interval) -> str:
    if iv.lo == iv.hi:
        return E._num(iv.lo)
    return f"[{E._num(iv.lo)}, {E._num(iv.hi)}]"


def parse_interval(text: str) -> Interval:
    t = text.strip()
    if t.startswith("["):
        if not t.endswith("]"):
            raise ValueError(f"bad interval {text!r}")
        parts = split_list(t[1:-1])
        if len(parts) != 2:
            raise ValueError(f"bad interval {text!r}")
        return Interval(float(parts[0]), float(parts[1]))
    return Interval(float(t))


def dump_automaton(h: HybridAutomaton) -> str:
    cfg: dict[str, str] = {
        "automaton.name": h.name,
        "automaton.variables": ", ".join(h.variables),
        "automaton.inputs": ", ".join(h.inputs),
        "automaton.initial_mode": h.initial_mode,
        "automaton.observations": ", ".join(E.to_string(o) for o in h.observations),
    }
    for v, iv in h.initial_set.items():
        cfg[f"automaton.initial.{v}"] = _iv(iv)
    for m in h.modes.values():
        cfg[f"mode.{m.name}.kind"] = m.kind
        if m.invariant:
            cfg[f"mode.{m.name}.invariant"] = "; ".join(str(c) for c in m.invariant)
        for v, f in m.flow.items():
            cfg[f"mode.{m.name}.flow.{v}"] = E.to_string(f)
    for i, t in enumerate(h.transitions):
        cfg[f"transition.{i}.src"] = t.src
        cfg[f"transition.{i}.dst"] = t.dst
        if t.guard:
            cfg[f"transition.{i}.guard"] = "; ".join(str(c) for c in t.guard)
        for v, r in t.reset.items():
            cfg[f"transition.{i}.reset.{v}"] = E.to_string(r)
    return format_config(cfg)


def load_automaton(text: str | dict) -> HybridAutomaton:
    cfg = parse_config(text) if isinstance(text, str) else text
    try:
        a = subkeys(cfg, "automaton")
        variables = split_list(a["variables"])
        inputs = split_list(a.get("inputs", ""))
        observations = [E.parse(o) for o in split_list(a.get("observations", ""))]
        initial = {k[len("initial."):]: parse_interval(v)
                   for k, v in a.items() if k.startswith("initial.")}
        modes: dict[str, Mode] = {}
        mode_keys = subkeys(cfg, "mode")
        for name in dict.fromkeys(k.split(".")[0] for k in mode_keys):
            mk = subkeys(mode_keys, name)
            flow = {k[len("flow."):]: E.parse(v) for k, v in mk.items() if k.startswith("flow.")}
            inv = tuple(E.parse_constraint(c) for c in split_list(mk.get("invariant", ""), ";"))
            modes[name] = Mode(name, mk.get("kind", "ode"), flow, inv)
        transitions = []
        tr_keys = subkeys(cfg, "transition")
        for idx in dict.fromkeys(k.split(".")[0] for k in tr_keys):
            tk = subkeys(tr_keys, idx)
            guard = tuple(E.parse_constraint(c) for c in split_list(tk.get("guard", ""), ";"))
            reset = {k[len("reset."):]: E.parse(v) for k, v in tk.items() if k.startswith("reset.")}
            transitions.append(Transition(tk["src"], tk["dst"], guard, reset))
        return HybridAutomaton(variables, modes, transitions, a["initial_mode"], initial,
                               observations, inputs, a.get("name", "automaton"))
    except KeyError as e:
        raise ConfigError(0, f"missing key {e.args[0]!r}") from None
