"""Acceptance criteria, one test each, with pinned tolerances and time budgets.

Every test records a ``criterion N: PASS|FAIL ...`` line that pytest echoes
in its terminal summary.
"""

import csv
import math
import os
import time

import numpy as np
import pytest

from nnreach.cases import (QUAD_VARS, TOY_BOX, load_fixture, mountain_car_loop, quadrotor_loop,
                           toy_network)
from nnreach.cli import main
from nnreach.encode import (brute_force, export_formula, export_milp, formula_residuals,
                            point_model, pwl_sandwich, read_lp)
from nnreach.interval import Interval, sigmoid
from nnreach.neural import Layer, NeuralNetwork, eval_network
from nnreach.reach import ReachSettings, network_reach, proxy_reach, run_closed_loop
from nnreach.taylor import TaylorModel, get_basis
from nnreach.verify import VERIFIED, UNKNOWN, check_property, quadrotor_property, sample_points, simulate

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")
TOY_LO, TOY_HI = 5.68760, 6.49442


def record(log, n, ok, detail):
    log.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def test_c1_proxy_identity(acceptance_log):
    # proxy ODE over [0, 1] reproduces the activation on a grid of pre-activations
    t0 = time.perf_counter()
    xs = np.linspace(-10, 10, 201)
    basis = get_basis(1, 4, time_var=0)
    worst, contained = 0.0, True
    for act, ref in (("sigmoid", sigmoid), ("tanh", math.tanh)):
        c = TaylorModel.const(basis, xs, xs.shape)
        g = proxy_reach(act, c, ReachSettings(path="ode"))
        lo, hi = g.bound_arrays()
        exact = np.array([ref(x) for x in xs])
        contained &= bool(np.all((lo <= exact) & (exact <= hi)))
        worst = max(worst, float(np.max(hi - lo)))
    wall = time.perf_counter() - t0
    record(acceptance_log, 1, contained and worst <= 1e-6 and wall <= 10,
           f"max width {worst:.2e} (<= 1e-6), contained {contained}, {wall:.1f} s (<= 10 s)")


def _random_nets(n=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        p, L, q = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
        dims = [p] + [int(rng.integers(1, 9)) for _ in range(L)] + [q]
        acts = [str(rng.choice(["sigmoid", "tanh"])) for _ in range(L)] + ["linear"]
        layers = [Layer(rng.uniform(-2, 2, (dims[i + 1], dims[i])), rng.uniform(-2, 2, dims[i + 1]), acts[i])
                  for i in range(L + 1)]
        yield NeuralNetwork(layers), rng.uniform(-1, 1, p)


def test_c2_random_networks_at_points(acceptance_log):
    st = ReachSettings(tm_order=8, ode_tol=1e-8, ode_step=0.25)
    worst, bad = 0.0, 0
    for nn, x in _random_nets():
        y = eval_network(nn, x)
        outs, _ = network_reach(nn, [Interval(v) for v in x], st)
        for tm, yy in zip(outs, y):
            r = tm.range()
            bad += not r.contains(float(yy))
            worst = max(worst, abs(r.lo - yy), abs(r.hi - yy))
    record(acceptance_log, 2, bad == 0 and worst <= 1e-6,
           f"200 nets, {bad} misses, max deviation {worst:.2e} (<= 1e-6)")


def test_c3_toy_box(acceptance_log):
    outs, _ = network_reach(toy_network(), list(TOY_BOX), ReachSettings(tm_order=4))
    r = outs[0].range()
    excess = max(TOY_LO - r.lo, 0) + max(r.hi - TOY_HI, 0)
    ok = r.lo <= TOY_LO and r.hi >= TOY_HI and excess <= 1e-3
    record(acceptance_log, 3, ok, f"[{r.lo:.6f}, {r.hi:.6f}] excess {excess:.2e} (<= 1e-3)")


@pytest.fixture(scope="module")
def mc_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mc")
    t0 = time.perf_counter()
    code = main(["verify", "--config", os.path.join(CONFIGS, "mountain_car.cfg"), "--out", str(out)])
    wall = time.perf_counter() - t0
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    return out, code, rows, wall


def _flowpipe_bounds(path):
    out = {}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["step"]), {})[row["var"]] = Interval(float(row["lo"]), float(row["hi"]))
    return out


def test_c4_mountain_car_soundness(acceptance_log, mc_run):
    out, _, rows, _ = mc_run
    loop = mountain_car_loop(load_fixture("mountain_car"))
    # the slice [-0.51, -0.49] of the five
    idx = 2
    bounds = _flowpipe_bounds(out / f"flowpipes_{idx}.csv")
    box = {"p": Interval(-0.51, -0.49), "v": Interval(0.0), "r": Interval(0.0)}
    t0 = time.perf_counter()
    escapes = 0
    for x0 in sample_points(box, 1000, seed=7):
        tr = simulate(loop, x0, 100)
        for k, s in enumerate(tr.states):
            if tr.exit_step is not None and k >= tr.exit_step:
                break
            escapes += any(not bounds[k][v].contains(s[v]) for v in ("p", "v", "r"))
    wall = float(rows[idx]["wall_time"]) + time.perf_counter() - t0
    record(acceptance_log, 4, escapes == 0 and wall <= 300,
           f"1000 samples x 100 steps, {escapes} escapes, {wall:.0f} s (<= 300 s)")


def test_c5_mountain_car_verified(acceptance_log, mc_run):
    _, code, rows, wall = mc_run
    n_ok = sum(r["verdict"] == VERIFIED and float(r["reward_bound"]) >= 90 and int(r["steps_bound"]) <= 110
               for r in rows)
    detail = "; ".join(f"{r['subset']} {r['verdict']} {r['reward_bound']} {r['steps_bound']}" for r in rows)
    record(acceptance_log, 5, code == 0 and n_ok == len(rows) == 5 and wall <= 1800,
           f"{n_ok}/{len(rows)} slices Verified, {wall:.0f} s (<= 1800 s): {detail}")


def test_c6_degraded_is_falsified(acceptance_log, tmp_path):
    t0 = time.perf_counter()
    code = main(["verify", "--config", os.path.join(CONFIGS, "mountain_car_degraded.cfg"),
                 "--out", str(tmp_path)])
    wall = time.perf_counter() - t0
    cex = [n for n in os.listdir(tmp_path) if n.startswith("counterexample_")]
    record(acceptance_log, 6, code == 1 and len(cex) > 0 and wall <= 120,
           f"exit {code}, {len(cex)} counterexample file(s), {wall:.1f} s (<= 120 s)")


def test_c7_pwl_gap(acceptance_log):
    gaps = {a: pwl_sandwich(a, (-8, 8), 100).max_gap for a in ("sigmoid", "tanh")}
    record(acceptance_log, 7, max(gaps.values()) <= 0.01,
           "100 pieces on [-8, 8]: " + ", ".join(f"{a} gap {g:.2e}" for a, g in gaps.items()) + " (<= 0.01)")


def test_c8_milp_contains_corner_range(acceptance_log):
    nn, ok, parts = toy_network(), True, []
    # the toy output is monotone in both inputs, so the corners give the exact range
    c_lo, c_hi = float(nn([2, 1])[0]), float(nn([3, 2])[0])
    for n in (1, 2, 3):
        hi = brute_force(read_lp(export_milp(nn, TOY_BOX, n_pieces=n)))
        lo = brute_force(read_lp(export_milp(nn, TOY_BOX, n_pieces=n, sense="min")))
        ok &= lo <= c_lo and hi >= c_hi
        parts.append(f"{n} pieces [{lo:.5f}, {hi:.5f}]")
    record(acceptance_log, 8, ok, "; ".join(parts) + " contain [5.68760, 6.49442]")


def test_c9_formula_faithfulness(acceptance_log):
    nn = toy_network()
    rng = np.random.default_rng(9)
    worst = {}
    for form in ("phi0", "exp_free"):
        text = export_formula(nn, TOY_BOX, form=form)
        w = 0.0
        for _ in range(1000):
            x = np.array([rng.uniform(2, 3), rng.uniform(1, 2)])
            w = max(w, max(r for _, r in formula_residuals(text, point_model(nn, x, form, TOY_BOX))))
        worst[form] = w
    record(acceptance_log, 9, max(worst.values()) <= 1e-9,
           ", ".join(f"{f} worst residual {w:.1e}" for f, w in worst.items()) + " (<= 1e-9)")


def test_c10_quadrotor(acceptance_log):
    loop = quadrotor_loop(load_fixture("quadrotor"))
    box = {v: Interval(0.0) for v in QUAD_VARS}
    box["px"], box["py"] = Interval(0.025, 0.05), Interval(0.0, 0.025)
    t0 = time.perf_counter()
    res = run_closed_loop(loop, box, 30, ReachSettings(path="functional", max_branches=256))
    verdict = check_property(res, quadrotor_property())
    wall = time.perf_counter() - t0
    bounds = res.step_bounds()
    escapes = 0
    for x0 in sample_points(box, 200, seed=10):
        tr = simulate(loop, x0, 30)
        for k, s in enumerate(tr.states):
            escapes += any(not bounds[k][v].contains(s[v]) for v in QUAD_VARS)
    ok = verdict.status in (VERIFIED, UNKNOWN) and res.n_branches <= 256 and escapes == 0
    record(acceptance_log, 10, ok,
           f"{verdict}, {res.n_branches} branches (<= 256), {res.merged} merges, "
           f"{escapes} sample escapes, {wall:.0f} s")
