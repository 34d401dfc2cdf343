import math

import numpy as np
import pytest

from nnreach import expr as E
from nnreach.automaton import HybridAutomaton, Mode
from nnreach.cases import (QUAD_ACTIONS, QUAD_VARS, BadAction, degrade, fixture_path, load_fixture,
                           mc_teacher, mountain_car_loop, mountain_car_model, quad_teacher,
                           quadrotor_loop, quadrotor_model, rk4_discretize)
from nnreach.neural import eval_network
from nnreach.verify import simulate


def _accel(action):
    flow = quadrotor_model(action).modes["fly"].flow
    return tuple(float(E.evaluate(flow[v], {})) for v in ("vx", "vy", "vz"))


def test_quadrotor_constant_accelerations():
    assert QUAD_ACTIONS[5] == {"theta": 0.1, "phi": -0.1, "tau": 11.81}
    g_tan = 9.81 * math.tan(0.1)
    assert _accel(5) == pytest.approx((g_tan, g_tan, 2.0), abs=1e-12)
    # the six-digit reference figure 0.984286 sits 3e-6 from 9.81 tan(0.1)
    assert _accel(5)[0] == pytest.approx(0.984286, abs=5e-6)
    assert _accel(0)[2] == pytest.approx(-2.0, abs=1e-12)
    assert _accel(7)[1] == pytest.approx(-9.81 * math.tan(0.1), abs=1e-12)


def test_quadrotor_bad_action_and_planner():
    for bad in (8, -1, True, 1.0):
        with pytest.raises(BadAction):
            quadrotor_model(bad)
    with pytest.raises(BadAction):
        quadrotor_model(None, b=(0.3, 0, 0))


def _one_var(flow):
    return HybridAutomaton(["x"], {"m": Mode("m", "ode", {"x": E.parse(flow)})}, [], "m")


def test_rk4_step_examples():
    step = rk4_discretize(_one_var("x"), 0.1).modes["m"]
    assert step.kind == "discrete_map"
    assert float(E.evaluate(step.flow["x"], {"x": 1.0})) == pytest.approx(1.10517083, abs=1e-8)
    lin = rk4_discretize(_one_var("1"), 0.1).modes["m"]
    assert float(E.evaluate(lin.flow["x"], {"x": 0.3})) == pytest.approx(0.4, abs=1e-15)


def test_mountain_car_position_clamp():
    h = mountain_car_model()
    loop = mountain_car_loop(load_fixture("mountain_car"), goal=10.0)
    tr = simulate(loop, {"p": 0.59, "v": 0.07, "r": 0.0}, 3)
    assert all(s["p"] <= 0.6 for s in tr.states) and tr.states[1]["p"] == 0.6
    assert h.initial_mode == "drive" and h.modes["goal"].kind == "idle"


def test_mountain_car_fixture_solves_from_center():
    tr = simulate(mountain_car_loop(load_fixture("mountain_car")), {"p": -0.5, "v": 0.0, "r": 0.0}, 200)
    assert tr.mode == "goal" and tr.exit_step <= 110 and tr.states[-1]["r"] >= 90


def test_mountain_car_fixture_follows_velocity():
    nn = load_fixture("mountain_car")
    assert float(eval_network(nn, np.array([-0.5, 0.05]))[0]) > 0
    assert float(eval_network(nn, np.array([-0.5, -0.05]))[0]) < 0
    assert mc_teacher(-0.5, 0.05) > 0.99


def test_degraded_fixture_is_weaker():
    nn, bad = load_fixture("mountain_car"), load_fixture("mountain_car_degraded")
    x = np.array([-0.5, 0.03])
    assert abs(float(eval_network(bad, x)[0])) < abs(float(eval_network(nn, x)[0]))
    assert degrade(nn, 0.5).layers[-1].W == pytest.approx(0.5 * nn.layers[-1].W, rel=1e-5)
    tr = simulate(mountain_car_loop(bad), {"p": -0.5, "v": 0.0, "r": 0.0}, 110)
    assert tr.mode != "goal" or tr.states[-1]["r"] < 90


def test_quadrotor_fixture_stays_near_planner():
    tr = simulate(quadrotor_loop(load_fixture("quadrotor")), {v: 0.0 for v in QUAD_VARS}, 30)
    assert max(abs(s[v]) for s in tr.states for v in ("px", "py", "pz")) <= 0.32


def test_quadrotor_teacher_symmetry():
    rng = np.random.default_rng(4)
    X = np.column_stack([rng.uniform(-0.3, 0.3, (200, 3)), rng.uniform(-0.5, 0.5, (200, 3))])
    a, b = quad_teacher(X), quad_teacher(-X)
    # mirroring the state flips every binary choice (7 - index)
    assert np.all(a + b == 7)


def test_fixture_headers_record_provenance():
    for name in ("mountain_car", "quadrotor", "mountain_car_degraded"):
        with open(fixture_path(name)) as fh:
            assert fh.readline().startswith("#")


def test_rk4_matches_exponential_growth_rate():
    step = rk4_discretize(_one_var("x"), 0.1).modes["m"]
    x = 1.0
    for _ in range(10):
        x = float(E.evaluate(step.flow["x"], {"x": x}))
    assert x == pytest.approx(math.e, rel=1e-5)
