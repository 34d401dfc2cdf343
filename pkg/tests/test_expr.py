import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnreach import expr as E
from nnreach.interval import Interval, sigmoid

MC_UPDATE = "v + 0.0015*u - 0.0025*cos(3*p)"


def test_parse_mountain_car_update_shape():
    e = E.parse(MC_UPDATE)
    assert isinstance(e, E.Bin) and e.op == "-"
    assert isinstance(e.left, E.Bin) and e.left.op == "+"
    rhs = e.right
    assert isinstance(rhs, E.Bin) and rhs.op == "*"
    cos = rhs.right
    assert isinstance(cos, E.Call) and cos.fn == "cos"
    assert isinstance(cos.arg, E.Bin) and cos.arg.op == "*"


def test_single_variable():
    assert E.parse("x") == E.Var("x")


def test_precedence():
    assert E.evaluate(E.parse("1 + 2*3"), {}) == 7.0


def test_eval_mountain_car_update():
    v = E.evaluate(E.parse(MC_UPDATE), {"p": -0.5, "v": 0.0, "u": 1.0})
    assert abs(v - 0.00132316) <= 1e-8


def test_eval_sigmoid():
    assert E.evaluate(E.parse("sigmoid(x)"), {"x": 0.0}) == 0.5


def test_eval_interval_encloses_square():
    r = E.evaluate(E.parse("x*x"), {"x": Interval(-1, 2)})
    assert r.contains(Interval(0, 4))


@pytest.mark.parametrize("fn,deriv", [
    ("sigmoid", lambda x: sigmoid(x) * (1 - sigmoid(x))),
    ("tanh", lambda x: 1 - math.tanh(x) ** 2),
])
def test_derivatives_match_closed_form(fn, deriv):
    d = E.differentiate(E.parse(f"{fn}(x)"), "x")
    for x in (-2.0, -0.3, 0.0, 0.7, 3.0):
        assert abs(E.evaluate(d, {"x": x}) - deriv(x)) <= 1e-14


def test_derivative_of_constant():
    d = E.differentiate(E.parse("3.5"), "x")
    assert isinstance(d, E.Const) and d.value == 0.0


def test_round_trip_to_string():
    e = E.parse(MC_UPDATE)
    assert E.parse(E.to_string(e)) == e


def test_parse_error_position():
    with pytest.raises(E.ParseError):
        E.parse("1 + * 2")


def test_tan_rule():
    bad = E.validate(E.parse("tan(x)"), ["x"], state_vars=["x"])
    assert any(isinstance(d, E.NonConstantTan) for d in bad)
    assert E.validate(E.parse("tan(theta)"), ["theta"], state_vars=["x"]) == []


def test_constraint_parse():
    c = E.parse_constraint("px <= 0.32")
    assert c.op == "<=" and c.bound == 0.32 and c.holds(0.32)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_interval_eval_contains_point_eval(a, b):
    e = E.parse("x*y - sin(x) + exp(y)/(2 + x*x)")
    env_pt = {"x": a, "y": b}
    env_iv = {"x": Interval(min(a, 0), max(a, 0)), "y": Interval(min(b, 1), max(b, 1))}
    assert E.evaluate(e, env_iv).contains(E.evaluate(e, env_pt))
