import math

import numpy as np

from nnreach import expr as E
from nnreach.automaton import HybridAutomaton, Mode, compose_closed_loop
from nnreach.cases import load_fixture, mountain_car_loop, mountain_car_model
from nnreach.interval import Interval, sigmoid
from nnreach.neural import Layer, NeuralNetwork, network_to_automaton
from nnreach.reach import (Chart, OdeSystem, ReachSettings, apply_saturations, discrete_map_step,
                           integrate, network_reach, run_closed_loop, subdivide_initial_set)
from nnreach.taylor import TaylorModel
from nnreach.verify import simulate


def ode_bound(flows, x0, duration, **kw):
    st = ReachSettings(**kw)
    chart = Chart({v: Interval(x) for v, x in x0.items()}, st.tm_order)
    system = OdeSystem({v: E.parse(f) for v, f in flows.items()}, st.tm_order)
    out = integrate(system, chart.initial_state(), duration, st)
    return {v: tm.range() for v, tm in out.items()}


def test_zero_flow_keeps_state():
    r = ode_bound({"x": "0"}, {"x": 0.3}, 1.0)["x"]
    assert r.contains(0.3) and r.width < 1e-14


def test_proxy_flow_reaches_sigmoid():
    r = ode_bound({"g": "0.9*g*(1-g)"}, {"g": 0.5}, 1.0, ode_step=0.1)["g"]
    assert r.contains(sigmoid(0.9))
    assert abs(r.mid - 0.710949) < 1e-6 and r.width <= 1e-4


def test_exponential_growth():
    r = ode_bound({"x": "x"}, {"x": 1.0}, 0.1)["x"]
    assert r.contains(math.exp(0.1)) and r.width <= 1e-6


def test_point_through_toy_hidden_layer(toy):
    hidden = NeuralNetwork([toy.layers[0]])
    outs, _ = network_reach(hidden, [Interval(2.0), Interval(1.0)])
    for tm in outs:
        assert tm.range().contains(sigmoid(0.9))
        assert abs(tm.range().mid - 0.710949) < 1e-6


def test_linear_layer_point_is_exact():
    nn = NeuralNetwork([Layer([[2.0, -1.0]], [0.5], "linear")])
    outs, _ = network_reach(nn, [Interval(1.0), Interval(3.0)])
    assert outs[0].range().contains(-0.5) and outs[0].range().width < 1e-12


def test_toy_box_bounds(toy):
    outs, _ = network_reach(toy, [Interval(2, 3), Interval(1, 2)], ReachSettings(tm_order=4))
    r = outs[0].range()
    lo, hi = float(toy([2, 1])[0]), float(toy([3, 2])[0])
    assert r.lo <= lo and r.hi >= hi
    assert r.width - (hi - lo) <= 1e-3


def _mc_step(p, v, u):
    h = mountain_car_model()
    chart = Chart({"p": Interval(p), "v": Interval(v), "r": Interval(0.0)}, 4)
    st = chart.initial_state()
    new, _ = discrete_map_step(dict(h.modes["drive"].flow), st, {"u": chart.const(u)},
                               h.saturations("drive"))
    return {k: tm.range() for k, tm in new.items()}


def test_mountain_car_step_push_right():
    s = _mc_step(-0.5, 0.0, 1.0)
    assert s["p"].contains(-0.5) and abs(s["v"].mid - 0.00132316) < 1e-8


def test_mountain_car_step_no_push():
    s = _mc_step(-0.45, 0.0, 0.0)
    assert abs(s["v"].mid - (-0.000547518)) < 5e-9


def test_velocity_clamp():
    chart = Chart({"v": Interval(0.069, 0.075)}, 3)
    events = []
    out = apply_saturations(chart.initial_state(), [("v", ">=", 0.07)], 1, events)
    r = out["v"].range()
    assert abs(r.lo - 0.069) < 1e-12 and abs(r.hi - 0.07) < 1e-12
    assert [e.kind for e in events] == ["saturation"]


def test_point_start_matches_simulation():
    loop = mountain_car_loop(load_fixture("mountain_car"))
    x0 = {"p": -0.52, "v": 0.0, "r": 0.0}
    res = run_closed_loop(loop, {k: Interval(v) for k, v in x0.items()}, 30,
                          ReachSettings(path="functional"))
    assert res.n_branches == 1
    tr = simulate(loop, x0, 30)
    for k, bnds in res.step_bounds().items():
        for v in ("p", "v", "r"):
            assert abs(bnds[v].mid - tr.states[k][v]) <= 1e-6
            assert bnds[v].contains(tr.states[k][v])


def test_overlapping_actions_branch_twice():
    nn = NeuralNetwork([Layer([[1.0], [-1.0]], [0.0, 0.0], "linear")])
    flow = {"x": E.parse("x + 0.1*a")}
    plant = HybridAutomaton(["x"], {"m": Mode("m", "discrete_map", flow)}, [], "m",
                            observations=[E.Var("x")], inputs=["a"])
    loop = compose_closed_loop(network_to_automaton(nn), plant, actions=[{"a": 1.0}, {"a": -1.0}])
    res = run_closed_loop(loop, {"x": Interval(-1, 1)}, 1, ReachSettings())
    assert len(res.root.children) == 2 and res.n_branches == 2


def test_subdivide_uniform_and_adaptive():
    a, b = subdivide_initial_set([Interval(-0.6, -0.4)], ("uniform", 2))
    assert (a[0].lo, a[0].hi, b[0].lo, b[0].hi) == (-0.6, -0.5, -0.5, -0.4)
    slabs = subdivide_initial_set([Interval(-0.6, -0.4), Interval(0.0)], ("uniform", 4, 0))
    assert len(slabs) == 4 and all(abs(s[0].width - 0.05) < 1e-12 for s in slabs)
    ad = subdivide_initial_set([Interval(-0.6, -0.4)], ("adaptive", 0.03))
    assert len(ad) == 7 and all(s[0].width <= 0.03 + 1e-12 for s in ad)
    assert ad[0][0].lo == -0.6 and ad[-1][0].hi == -0.4
    assert all(ad[i][0].hi == ad[i + 1][0].lo for i in range(6))


def test_batched_proxy_encloses_activation():
    from nnreach.reach import proxy_reach
    chart = Chart({"c": Interval(-0.5, 0.5)}, 4)
    c = TaylorModel.stack([chart.initial_state()["c"].scale(s) for s in (0.5, 1.0)])
    for act, f in (("sigmoid", sigmoid), ("tanh", math.tanh)):
        ode = proxy_reach(act, c, ReachSettings(path="ode"))
        for i, s in enumerate((0.5, 1.0)):
            for x in np.linspace(-1, 1, 9):
                assert ode[i].contains_value([x], f(0.5 * s * x))
