import pytest

from nnreach import expr as E
from nnreach.automaton import (HybridAutomaton, Mode, NamespaceCollision, Scheduling, Transition,
                               UnknownMode, WiringArityMismatch, compose_closed_loop, dump_automaton,
                               load_automaton, validate_automaton)
from nnreach.cases import mountain_car_model
from nnreach.interval import Interval
from nnreach.neural import Layer, NeuralNetwork, network_to_automaton
from nnreach.reach import ReachSettings, run_closed_loop
from nnreach.verify import simulate


def identity_plant():
    flow = {"y0": E.Var("y0"), "y1": E.Var("y1"), "o": E.Var("a")}
    return HybridAutomaton(["y0", "y1", "o"], {"m": Mode("m", "discrete_map", flow)}, [], "m",
                           observations=[E.Var("y0"), E.Var("y1")], inputs=["a"], name="identity")


def test_mountain_car_model_is_well_formed():
    assert validate_automaton(mountain_car_model()) == []


def test_unknown_mode_reported():
    h = mountain_car_model()
    h.transitions.append(Transition("drive", "q9"))
    assert UnknownMode("q9") in validate_automaton(h)


def test_tan_of_state_in_flow_rejected():
    h = HybridAutomaton(["x"], {"m": Mode("m", "ode", {"x": E.parse("tan(x)")})}, [], "m")
    assert any(isinstance(d, E.NonConstantTan) for d in validate_automaton(h))


def test_toy_network_through_identity_plant_outputs_network_value(toy):
    loop = compose_closed_loop(network_to_automaton(toy), identity_plant())
    init = {"y0": Interval(2.0), "y1": Interval(1.0), "o": Interval(0.0)}
    res = run_closed_loop(loop, init, 1, ReachSettings())
    o = res.step_bounds()[1]["o"]
    assert o.contains(float(toy([2, 1])[0])) and o.width < 1e-6
    tr = simulate(loop, {"y0": 2.0, "y1": 1.0, "o": 0.0}, 1)
    assert abs(tr.states[1]["o"] - 5.68760) < 1e-4


def test_mountain_car_loop_semantics():
    from nnreach.cases import load_fixture, mountain_car_loop
    nn = load_fixture("mountain_car")
    loop = mountain_car_loop(nn)
    tr = simulate(loop, {"p": -0.5, "v": 0.0, "r": 0.0}, 1)
    u = float(nn([-0.5, 0.0])[0])
    assert abs(tr.states[1]["v"] - (0.0015 * u - 0.0025 * __import__("math").cos(-1.5))) < 1e-15


def test_identity_controller_equals_plant_ode():
    nn = NeuralNetwork([Layer([[1.0]], [0.0], "linear")])
    plant = HybridAutomaton(["p"], {"fly": Mode("fly", "ode", {"p": E.Var("a")})}, [], "fly",
                            observations=[E.Var("p")], inputs=["a"], name="integrator")
    loop = compose_closed_loop(network_to_automaton(nn), plant, scheduling=Scheduling(sample_time=0.1))
    res = run_closed_loop(loop, {"p": Interval(1.0)}, 1, ReachSettings())
    # zero-order hold: p(0.1) = p0 + 0.1 * p0
    assert res.step_bounds()[1]["p"].contains(1.1)
    assert res.step_bounds()[1]["p"].width < 1e-9


def test_wiring_arity_and_namespace_checks(toy):
    plant = identity_plant()
    with pytest.raises(WiringArityMismatch):
        compose_closed_loop(network_to_automaton(toy), plant, wiring=["y0"])
    clash = HybridAutomaton(["u"], {"m": Mode("m", "discrete_map", {"u": E.Var("a")})}, [], "m",
                            observations=[E.Var("u"), E.Var("u")], inputs=["a"])
    with pytest.raises(NamespaceCollision):
        compose_closed_loop(network_to_automaton(toy), clash)


def test_dump_load_round_trip():
    h = mountain_car_model()
    text = dump_automaton(h)
    back = load_automaton(text)
    assert dump_automaton(back) == text
    assert validate_automaton(back) == []
