"""Command-line front end.

Verbs::

    nnreach verify    --config run.cfg [--order N] [--step H] [--subdivide S] [--jobs J] [--out DIR]
    nnreach simulate  --config run.cfg [--out DIR]
    nnreach export    {milp|formula-phi0|formula-expfree|automaton} --config run.cfg [--out FILE]
    nnreach transform --config run.cfg [--out FILE]          (same as export automaton)
    nnreach plot-data RUN_DIR XVAR YVAR [--out FILE]

Exit codes: 0 all subsets Verified, 1 any Falsified, 2 any Unknown (none
Falsified), 3 usage, configuration or IO error.  ``NNREACH_LOG`` sets the log
level (DEBUG, INFO, WARNING).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import cases
from . import expr as E
from .automaton import (ClosedLoop, Scheduling, compose_closed_loop, dump_automaton,
                        load_automaton, parse_interval)
from .config import ConfigError, format_config, parse_config, split_list, write_atomic
from .interval import Interval
from .neural import FormatError, NeuralNetwork, network_to_automaton, read_network
from .reach import ReachSettings, flowpipe_csv, run_closed_loop, subdivide_initial_set
from .verify import (FALSIFIED, VERIFIED, Property, Verdict, check_property,
                     counterexample_csv, falsify_by_simulation, simulate)

log = logging.getLogger("nnreach")

EXIT_OK, EXIT_FALSIFIED, EXIT_UNKNOWN, EXIT_ERROR = 0, 1, 2, 3
BUILTIN_PLANTS = ("mountain_car", "quadrotor", "none")
EXPORT_TARGETS = ("milp", "formula-phi0", "formula-expfree", "automaton")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _fmt_iv(iv: Interval) -> str:
    return f"[{E._num(iv.lo)}, {E._num(iv.hi)}]"


def parse_subdivide(text: str) -> tuple:
    parts = text.split()
    if not parts or parts[0] == "none":
        return ("uniform", 1)
    try:
        if parts[0] == "uniform" and len(parts) in (2, 3):
            return ("uniform", int(parts[1])) + tuple(parts[2:])
        if parts[0] == "adaptive" and len(parts) == 2:
            return ("adaptive", float(parts[1]))
    except ValueError:
        pass
    raise ValueError(f"bad subdivision {text!r}; use 'uniform K [VAR]', 'adaptive W' or 'none'")


def format_subdivide(s: tuple) -> str:
    if s == ("uniform", 1):
        return "none"
    return " ".join(E._num(x) if isinstance(x, float) else str(x) for x in s)


_REACH_FIELDS = {f.name: f.type for f in dataclasses.fields(ReachSettings)}


@dataclass
class RunConfig:
    plant: str = "mountain_car"
    network: str | None = None       # path, or None for the plant's fixture
    steps: int = 110
    subdivide: tuple = ("uniform", 1)
    seed: int = 0
    out: str = "out"
    jobs: int | None = None
    samples: int = 1000
    presamples: int = 16
    init: dict = field(default_factory=dict)       # name -> Interval, file order
    reach: dict = field(default_factory=dict)      # ReachSettings overrides, text
    prop: dict = field(default_factory=dict)       # property keys, text
    export: dict = field(default_factory=dict)     # exporter keys, text
    base_dir: str = field(default=".", compare=False)

    def path(self, p: str) -> str:
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def network_path(self) -> str:
        if self.network is None:
            if self.plant not in ("mountain_car", "quadrotor"):
                raise ConfigError(0, "run.network is required for this plant")
            return cases.fixture_path(self.plant)
        if self.network.startswith("fixture:"):
            return cases.fixture_path(self.network[len("fixture:"):])
        return self.path(self.network)

    def settings(self) -> ReachSettings:
        kw = {}
        for k, v in self.reach.items():
            typ = _REACH_FIELDS[k]
            if typ in ("bool", bool):
                kw[k] = v.lower() in ("1", "true", "yes", "on")
            elif typ in ("int", int):
                kw[k] = int(v)
            elif typ in ("float", float):
                kw[k] = float(v)
            else:
                kw[k] = v
        if self.plant == "quadrotor":
            kw.setdefault("path", "functional")
        return ReachSettings(**kw)


def load_run_config(text: str, base_dir: str = ".") -> RunConfig:
    items = parse_config(text)
    cfg = RunConfig(base_dir=base_dir)
    for key, value in items.items():
        sect, _, name = key.partition(".")
        try:
            if sect == "run":
                if name == "plant":
                    cfg.plant = value
                elif name == "network":
                    cfg.network = value
                elif name == "steps":
                    cfg.steps = int(value)
                elif name == "subdivide":
                    cfg.subdivide = parse_subdivide(value)
                elif name == "seed":
                    cfg.seed = int(value)
                elif name == "out":
                    cfg.out = value
                elif name == "jobs":
                    cfg.jobs = int(value)
                elif name == "samples":
                    cfg.samples = int(value)
                elif name == "presamples":
                    cfg.presamples = int(value)
                else:
                    raise ConfigError(0, f"unknown key {key!r}")
            elif sect == "init":
                cfg.init[name] = parse_interval(value)
            elif sect == "reach":
                if name not in _REACH_FIELDS:
                    raise ConfigError(0, f"unknown reach setting {name!r}")
                cfg.reach[name] = value
            elif sect == "property":
                cfg.prop[name] = value
            elif sect == "export":
                cfg.export[name] = value
            else:
                raise ConfigError(0, f"unknown section in {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(0, f"{key}: {exc}") from None
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    if cfg.plant not in BUILTIN_PLANTS and not os.path.exists(cfg.path(cfg.plant)):
        raise ConfigError(0, f"plant model file not found: {cfg.path(cfg.plant)}")
    if cfg.plant != "none" or cfg.network is not None:
        p = cfg.network_path()
        if not os.path.exists(p):
            raise ConfigError(0, f"network file not found: {p}")
    if cfg.steps < 1:
        raise ConfigError(0, "run.steps must be at least 1")
    if cfg.seed < 0:
        raise ConfigError(0, "run.seed must be non-negative")
    if cfg.jobs is not None and cfg.jobs < 1:
        raise ConfigError(0, "run.jobs must be at least 1")
    if cfg.samples < 1 or cfg.presamples < 0:
        raise ConfigError(0, "run.samples must be at least 1 and run.presamples non-negative")
    try:
        s = cfg.settings()
        subdivide_initial_set([Interval(0, 1)], cfg.subdivide)
    except (ValueError, TypeError) as exc:
        raise ConfigError(0, str(exc)) from None
    if not 1 <= s.tm_order <= 8:
        raise ConfigError(0, "reach.tm_order must be in 1..8")
    if not s.ode_step > 0:
        raise ConfigError(0, "reach.ode_step must be positive")
    if s.max_branches < 1:
        raise ConfigError(0, "reach.max_branches must be at least 1")
    if s.path not in ("ode", "functional"):
        raise ConfigError(0, "reach.path must be 'ode' or 'functional'")


def dump_run_config(cfg: RunConfig) -> str:
    items = {"run.plant": cfg.plant}
    if cfg.network is not None:
        items["run.network"] = cfg.network
    items["run.steps"] = str(cfg.steps)
    items["run.subdivide"] = format_subdivide(cfg.subdivide)
    items["run.seed"] = str(cfg.seed)
    items["run.out"] = cfg.out
    if cfg.jobs is not None:
        items["run.jobs"] = str(cfg.jobs)
    items["run.samples"] = str(cfg.samples)
    items["run.presamples"] = str(cfg.presamples)
    for k, v in cfg.init.items():
        items[f"init.{k}"] = _fmt_iv(v)
    for sect, d in (("reach", cfg.reach), ("property", cfg.prop), ("export", cfg.export)):
        for k, v in d.items():
            items[f"{sect}.{k}"] = v
    return format_config(items)


def read_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return load_run_config(text, os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Building loops and properties from a config
# ---------------------------------------------------------------------------

def load_net(cfg: RunConfig) -> NeuralNetwork:
    p = cfg.network_path()
    try:
        return read_network(p)
    except OSError as exc:
        raise UsageError(f"cannot read network {p}: {exc.strerror}") from None
    except (FormatError, ValueError) as exc:
        raise UsageError(f"bad network file {p}: {exc}") from None


def build_loop(cfg: RunConfig, nn: NeuralNetwork | None = None) -> ClosedLoop:
    nn = nn or load_net(cfg)
    if cfg.plant == "mountain_car":
        goal = float(cfg.prop.get("goal_position", cases.MC_GOAL))
        return cases.mountain_car_loop(nn, goal)
    if cfg.plant == "quadrotor":
        b = tuple(float(x) for x in split_list(cfg.prop.get("planner", "0.25, 0.25, 0.25")))
        return cases.quadrotor_loop(nn, b)
    if cfg.plant == "none":
        raise UsageError("run.plant = none has no closed loop; only export works")
    with open(cfg.path(cfg.plant)) as fh:
        plant = load_automaton(fh.read())
    st = cfg.prop.get("sample_time")
    sched = Scheduling(sample_time=float(st)) if st else None
    return compose_closed_loop(network_to_automaton(nn), plant, scheduling=sched)


def initial_box(cfg: RunConfig, loop: ClosedLoop) -> dict:
    plant = loop.plant
    unknown = set(cfg.init) - set(plant.variables)
    if unknown:
        raise UsageError(f"init names unknown plant variables {sorted(unknown)}")
    # unlisted variables take the plant's initial set, else 0
    return {v: cfg.init.get(v, plant.initial_set.get(v, Interval(0.0))) for v in plant.variables}


def build_property(cfg: RunConfig) -> Property:
    p = cfg.prop
    if cfg.plant == "mountain_car":
        base = dict(max_steps=110, goal="goal", min_reward=90.0)
    elif cfg.plant == "quadrotor":
        bound = float(p.get("bound", cases.QUAD_BOUND))
        safety = []
        for v in ("px", "py", "pz"):
            safety += [f"{v} <= {bound!r}", f"{v} >= {-bound!r}"]
        base = dict(max_steps=cfg.steps, safety=safety)
    else:
        base = dict(max_steps=cfg.steps)
    if "max_steps" in p:
        base["max_steps"] = int(p["max_steps"])
    if "min_reward" in p:
        base["min_reward"] = float(p["min_reward"]) if p["min_reward"] != "none" else None
    if "goal" in p:
        base["goal"] = p["goal"] if p["goal"] != "none" else None
    if "safety" in p:
        base["safety"] = split_list(p["safety"], ";")
    if "terminal" in p:
        base["terminal"] = split_list(p["terminal"], ";")
    safety = tuple(E.parse_constraint(c) if isinstance(c, str) else c for c in base.get("safety", ()))
    terminal = tuple(E.parse_constraint(c) for c in base.get("terminal", ()))
    return Property(base["max_steps"], safety, terminal, base.get("goal"), base.get("min_reward"),
                    p.get("reward_var", "r"))


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _subset_label(box: dict) -> str:
    parts = [f"{v}={_fmt_iv(iv)}" for v, iv in box.items() if iv.hi > iv.lo]
    return "; ".join(parts) if parts else "; ".join(f"{v}={E._num(iv.lo)}" for v, iv in box.items())


def verify_subset(cfg_text: str, base_dir: str, index: int, box_items: list) -> dict:
    """Reach, check, and falsify one subset.  Runs inside a worker process."""
    cfg = load_run_config(cfg_text, base_dir)
    loop = build_loop(cfg)
    prop = build_property(cfg)
    box = {v: Interval(lo, hi) for v, lo, hi in box_items}
    t0 = time.perf_counter()
    verdict, result = None, None
    cex = None
    if cfg.presamples:
        cex = falsify_by_simulation(loop, box, prop, cfg.presamples, True, cfg.seed + index)
    if cex is None:
        result = run_closed_loop(loop, box, max(cfg.steps, 1), cfg.settings())
        verdict = check_property(result, prop)
        if verdict.status != VERIFIED:
            cex = falsify_by_simulation(loop, box, prop, cfg.samples, True, cfg.seed + index)
    if cex is not None:
        verdict = Verdict(FALSIFIED, reason=f"{cex.violated} at step {cex.step}", step=cex.step,
                          counterexample=cex)
    wall = time.perf_counter() - t0
    log.info("subset %d %s: %s (%.1f s)", index, _subset_label(box), verdict, wall)
    return {
        "index": index,
        "subset": _subset_label(box),
        "verdict": verdict.status,
        "reward_bound": "" if verdict.reward_bound is None else f"{verdict.reward_bound:.6g}",
        "steps_bound": "" if verdict.steps_bound is None else str(verdict.steps_bound),
        "wall_time": f"{wall:.2f}",
        "reason": verdict.reason,
        "branches": result.n_branches if result else 0,
        "flowpipes": flowpipe_csv(result) if result else None,
        "counterexample": counterexample_csv(cex) if cex else None,
    }


REPORT_COLUMNS = ["subset", "verdict", "reward_bound", "steps_bound", "wall_time", "reason"]


def report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_table(rows: list[dict]) -> str:
    out = []
    for r in rows:
        rb = f">= {r['reward_bound']}" if r["reward_bound"] else "-"
        sb = f"<= {r['steps_bound']}" if r["steps_bound"] else "-"
        line = f"{r['subset']:<36} {r['verdict']:<10} {rb:<14} {sb:<8} {r['wall_time']:>9}s"
        if r["reason"] and r["verdict"] != VERIFIED:
            line += f"  {r['reason']}"
        out.append(line)
    return "\n".join(out)


def exit_code(verdicts: list[str]) -> int:
    if any(v == FALSIFIED for v in verdicts):
        return EXIT_FALSIFIED
    if any(v != VERIFIED for v in verdicts):
        return EXIT_UNKNOWN
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    loop = build_loop(cfg)
    box = initial_box(cfg, loop)
    subsets = subdivide_initial_set(box, cfg.subdivide)
    text = dump_run_config(cfg)
    tasks = [(text, cfg.base_dir, i, [(v, iv.lo, iv.hi) for v, iv in s.items()])
             for i, s in enumerate(subsets)]
    jobs = cfg.jobs or os.cpu_count() or 1
    log.info("%d subsets on %d workers", len(tasks), min(jobs, len(tasks)))
    if jobs == 1 or len(tasks) == 1:
        rows = [verify_subset(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            rows = list(pool.map(verify_subset, *zip(*tasks)))
    out = cfg.out
    write_atomic(os.path.join(out, "run.cfg"), text)
    write_atomic(os.path.join(out, "report.csv"), report_csv(rows))
    for r in rows:
        if r["flowpipes"]:
            write_atomic(os.path.join(out, f"flowpipes_{r['index']}.csv"), r["flowpipes"])
        if r["counterexample"]:
            write_atomic(os.path.join(out, f"counterexample_{r['index']}.csv"), r["counterexample"])
    print(report_table(rows))
    return exit_code([r["verdict"] for r in rows])


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def trace_csv(tr) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    svars = list(tr.states[0])
    ivars = list(tr.inputs[0]) if tr.inputs else []
    w.writerow(["step"] + svars + ivars + ["action"])
    for k, s in enumerate(tr.states):
        inp = tr.inputs[k] if k < len(tr.inputs) else {}
        act = tr.actions[k] if k < len(tr.actions) else None
        w.writerow([k] + [repr(s[v]) for v in svars] + [repr(inp[v]) if v in inp else "" for v in ivars]
                   + ["" if act is None else act])
    return buf.getvalue()


def cmd_simulate(cfg: RunConfig) -> int:
    loop = build_loop(cfg)
    box = initial_box(cfg, loop)
    x0 = {v: iv.mid for v, iv in box.items()}
    tr = simulate(loop, x0, cfg.steps)
    write_atomic(os.path.join(cfg.out, "trace.csv"), trace_csv(tr))
    last = tr.states[-1]
    print(f"{len(tr.states) - 1} steps from the box centre, final "
          + " ".join(f"{v}={last[v]:.6g}" for v in last)
          + ("" if tr.exit_step is None else f", left mode at step {tr.exit_step}"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def network_box(cfg: RunConfig, nn: NeuralNetwork) -> list:
    """Input box of the network: ``init`` entries directly, or the wiring image."""
    if cfg.plant == "none":
        box = list(cfg.init.values())
        if len(box) != nn.p:
            raise UsageError(f"network takes {nn.p} inputs, init lists {len(box)}")
        return box
    loop = build_loop(cfg, nn)
    env = initial_box(cfg, loop)
    return [Interval.coerce(E.evaluate(w, env)) for w in loop.wiring]


def cmd_export(cfg: RunConfig, target: str, out: str | None = None) -> int:
    from . import encode

    nn = load_net(cfg)
    box = network_box(cfg, nn)
    x = cfg.export
    if target == "milp":
        text = encode.export_milp(nn, box, int(x.get("pieces", 100)), int(x.get("output", 0)),
                                  x.get("sense", "max"))
        encode.read_lp(text)  # self-check
        default = "network.lp"
    elif target in ("formula-phi0", "formula-expfree"):
        form = "phi0" if target == "formula-phi0" else "exp_free"
        text = encode.export_formula(nn, box, x.get("predicate"), form)
        default = f"network_{form}.smt2"
    elif target == "automaton":
        text = dump_automaton(network_to_automaton(nn, box))
        load_automaton(text)  # self-check
        default = "network.automaton"
    else:
        raise UsageError(f"unknown export target {target!r}; choose from {', '.join(EXPORT_TARGETS)}")
    path = out or os.path.join(cfg.out, default)
    write_atomic(path, text)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot-data
# ---------------------------------------------------------------------------

def read_flowpipes(run_dir: str) -> dict[int, dict[str, Interval]]:
    """Per-step bounds hulled over every flowpipe file of a run."""
    try:
        names = sorted(f for f in os.listdir(run_dir) if f.startswith("flowpipes_") and f.endswith(".csv"))
    except OSError as exc:
        raise UsageError(f"cannot read run directory {run_dir}: {exc.strerror}") from None
    if not names:
        raise UsageError(f"no flowpipe files in {run_dir}")
    out: dict[int, dict[str, Interval]] = {}
    for n in names:
        with open(os.path.join(run_dir, n)) as fh:
            for row in csv.DictReader(fh):
                k = int(row["step"])
                iv = Interval(float(row["lo"]), float(row["hi"]))
                cur = out.setdefault(k, {})
                v = row["var"]
                cur[v] = iv if v not in cur else cur[v].hull(iv)
    return dict(sorted(out.items()))


def plot_data_csv(steps: dict, xvar: str, yvar: str) -> str:
    known = set().union(*(b.keys() for b in steps.values()))
    for v in (xvar, yvar):
        if v not in known:
            raise UsageError(f"unknown variable {v!r}; run has {', '.join(sorted(known))}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "x_lo", "x_hi", "y_lo", "y_hi"])
    for k, b in steps.items():
        if xvar in b and yvar in b:
            w.writerow([k, repr(b[xvar].lo), repr(b[xvar].hi), repr(b[yvar].lo), repr(b[yvar].hi)])
    return buf.getvalue()


def cmd_plot_data(run_dir: str, xvar: str, yvar: str, out: str | None = None) -> int:
    text = plot_data_csv(read_flowpipes(run_dir), xvar, yvar)
    path = out or os.path.join(run_dir, f"plot_{xvar}_{yvar}.csv")
    write_atomic(path, text)
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, reach: bool = True) -> None:
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--out", help="output directory (or file for export)")
    p.add_argument("--seed", type=int, help="falsification sampling seed")
    if reach:
        p.add_argument("--order", type=int, help="Taylor model order (1-8)")
        p.add_argument("--step", type=float, help="largest integration step")
        p.add_argument("--subdivide", help="'uniform K [VAR]', 'adaptive W' or 'none'")
        p.add_argument("--jobs", type=int, help="worker processes (default: all CPUs)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nnreach", description="Reachability of closed loops with neural-network controllers.")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    _common(sub.add_parser("verify", help="reach, check and falsify every subset"))
    _common(sub.add_parser("simulate", help="simulate from the centre of the initial box"), reach=False)
    ex = sub.add_parser("export", help="write an encoding of the network")
    ex.add_argument("target", choices=EXPORT_TARGETS)
    _common(ex, reach=False)
    _common(sub.add_parser("transform", help="write the network's hybrid automaton"), reach=False)
    pd = sub.add_parser("plot-data", help="per-step rectangles of two variables from a run")
    pd.add_argument("run_dir")
    pd.add_argument("xvar")
    pd.add_argument("yvar")
    pd.add_argument("--out", help="output CSV file")
    return ap


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "out", None) and args.verb in ("verify", "simulate"):
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "order", None) is not None:
        cfg.reach["tm_order"] = str(args.order)
    if getattr(args, "step", None) is not None:
        cfg.reach["ode_step"] = repr(args.step)
    if getattr(args, "subdivide", None):
        cfg.subdivide = parse_subdivide(args.subdivide)
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    validate_run_config(cfg)
    return cfg


def setup_logging() -> None:
    level = os.environ.get("NNREACH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "plot-data":
            return cmd_plot_data(args.run_dir, args.xvar, args.yvar, args.out)
        cfg = _apply_flags(read_run_config(args.config), args)
        if args.verb == "verify":
            return cmd_verify(cfg)
        if args.verb == "simulate":
            return cmd_simulate(cfg)
        target = "automaton" if args.verb == "transform" else args.target
        return cmd_export(cfg, target, args.out)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"nnreach: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
