import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from nnreach.interval import Interval, sigmoid
from nnreach.taylor import TaylorModel, get_basis


def x_tm(order, nvars=1, v=0):
    return TaylorModel.variable(get_basis(nvars, order), v)


def test_square_within_order_is_exact():
    x = x_tm(2)
    sq = x * x
    assert abs(sq.poly_dict(1e-300)[(2,)] - 1.0) < 1e-15
    assert sq.remainder.width < 1e-14


def test_constant_addition():
    b = get_basis(1, 3)
    s = TaylorModel.const(b, 2.0) + TaylorModel.const(b, 3.0)
    assert s.poly_dict() == {(0,): 5.0}


def test_square_truncated_at_order_one():
    sq = x_tm(1) * x_tm(1)
    assert all(abs(c) < 1e-15 for e, c in sq.poly_dict().items() if sum(e) > 0)
    assert sq.remainder.contains(Interval(0, 1))


def test_sigmoid_of_zero_constant():
    r = TaylorModel.const(get_basis(1, 3), 0.0).apply("sigmoid")
    assert abs(r.poly_dict()[(0,)] - 0.5) < 1e-15 and r.remainder.width < 1e-14


def test_sigmoid_identity_order_one():
    r = x_tm(1).apply("sigmoid")
    d = r.poly_dict()
    assert abs(d[(0,)] - 0.5) < 1e-12 and abs(d[(1,)] - 0.25) < 1e-12
    assert r.remainder.width <= 0.1
    for x in np.linspace(-1, 1, 41):
        assert r.contains_value([x], sigmoid(x))


def test_cos_of_constant():
    r = TaylorModel.const(get_basis(1, 2), -1.5).apply("cos")
    assert r.bound().contains(math.cos(1.5)) and r.bound().width < 1e-14
    assert abs(r.bound().mid - 0.0707372) < 1e-7


def test_bound_affine_plus_remainder():
    b = get_basis(1, 2)
    tm = (TaylorModel.const(b, 0.5) + x_tm(2).scale(0.25)).with_remainder(-0.1, 0.1)
    r = tm.bound()
    assert abs(r.lo - 0.15) < 1e-12 and abs(r.hi - 0.85) < 1e-12


def test_bound_constant():
    r = TaylorModel.const(get_basis(2, 3), 7.0).bound()
    assert r.contains(7.0) and r.width < 1e-13


def test_bound_product_of_unit_vars():
    b = get_basis(2, 2)
    r = (TaylorModel.variable(b, 0) * TaylorModel.variable(b, 1)).bound()
    assert r.lo >= -1 - 1e-12 and r.hi <= 1 + 1e-12


def test_integrate_time():
    b = get_basis(2, 3, time_var=1)
    one = TaylorModel.const(b, 1.0)
    t = TaylorModel.variable(b, 1, 0.0, 1.0)
    assert abs(one.integrate_time().poly_dict(1e-15)[(0, 1)] - 1.0) < 1e-15
    assert abs(t.integrate_time().poly_dict(1e-15)[(0, 2)] - 0.5) < 1e-15


def test_proxy_flow_first_order_term():
    b = get_basis(2, 3, time_var=1)
    g = TaylorModel.const(b, 0.5)
    f = (g * (TaylorModel.const(b, 1.0) - g)).scale(0.9)
    assert abs(f.integrate_time().poly_dict(1e-15)[(0, 1)] - 0.225) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.sampled_from(["sigmoid", "tanh", "sin", "cos", "exp"]), st.integers(1, 6))
def test_composition_encloses_function(x, fn, order):
    b = get_basis(1, order)
    tm = (TaylorModel.variable(b, 0).scale(0.8) + TaylorModel.const(b, 0.3)).apply(fn)
    f = {"sigmoid": sigmoid, "tanh": math.tanh, "sin": math.sin, "cos": math.cos, "exp": math.exp}[fn]
    assert tm.contains_value([x], f(0.8 * x + 0.3))
    assert tm.bound().contains(f(0.8 * x + 0.3))


@settings(max_examples=60, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 5))
def test_product_encloses_product(x, y, order):
    b = get_basis(2, order)
    p = TaylorModel.variable(b, 0, 0.5, 1.5) * TaylorModel.variable(b, 1, -0.2, 0.7)
    p = p * p
    assert p.contains_value([x, y], ((0.5 + 1.5 * x) * (-0.2 + 0.7 * y)) ** 2)
