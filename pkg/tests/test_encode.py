from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnreach.cases import TOY_BOX, toy_network
from nnreach.encode import (ExpFreeNeedsSingleHiddenLayer, LpParseError, NonRationalWeightGuard,
                            UnsupportedActivation, brute_force, count_rows, declared, export_formula,
                            export_milp, formula_residuals, formula_rewrite, point_model, pwl_sandwich,
                            read_lp)
from nnreach.encode.formula import smt_num
from nnreach.interval import Interval
from nnreach.neural import Layer, NeuralNetwork

TOY_LO, TOY_HI = 5.687596021000023, 6.494424046643973


def _samples(box, n, seed):
    rng = np.random.default_rng(seed)
    return [np.array([rng.uniform(iv.lo, iv.hi) for iv in box]) for _ in range(n)]


# -- sandwich ------------------------------------------------------------------


@pytest.mark.parametrize("act", ["sigmoid", "tanh"])
def test_sandwich_encloses_and_gap_shrinks(act):
    f = {"sigmoid": lambda x: 1 / (1 + np.exp(-x)), "tanh": np.tanh}[act]
    xs = np.linspace(-8, 8, 4001)
    gaps = []
    for n in (1, 4, 16, 100):
        s = pwl_sandwich(act, (-8, 8), n)
        assert np.all(s.lower_at(xs) <= f(xs)) and np.all(f(xs) <= s.upper_at(xs))
        gaps.append(s.max_gap)
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_sandwich_at_zero_and_piece_count():
    s = pwl_sandwich("sigmoid", (-8, 8), 100)
    assert s.n_pieces == 100 and s.max_gap <= 0.01
    assert s.lower_at(0.0) <= 0.5 <= s.upper_at(0.0)
    with pytest.raises(ValueError):
        pwl_sandwich("sigmoid", (-1, 1), 0)
    with pytest.raises(UnsupportedActivation):
        pwl_sandwich("relu", (-1, 1), 4)


# -- MILP ----------------------------------------------------------------------


def test_single_neuron_row_counts():
    nn = NeuralNetwork([Layer([[1.0]], [0.0], "sigmoid")])
    prob = read_lp(export_milp(nn, [Interval(-1, 1)], n_pieces=2))
    assert len(prob.binaries) == 2
    assert count_rows(prob) == {"sum": 1, "bigm": 8, "affine": 1, "other": 0}


def test_linear_network_has_no_binaries():
    nn = NeuralNetwork([Layer([[1.0, 2.0]], [0.5], "linear")])
    prob = read_lp(export_milp(nn, [Interval(0, 1), Interval(0, 1)]))
    assert prob.binaries == [] and brute_force(prob) == pytest.approx(3.5)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_toy_milp_encloses_corner_range(n):
    nn = toy_network()
    hi = brute_force(read_lp(export_milp(nn, TOY_BOX, n_pieces=n)))
    lo = brute_force(read_lp(export_milp(nn, TOY_BOX, n_pieces=n, sense="min")))
    assert hi >= TOY_HI - 1e-9 and lo <= TOY_LO + 1e-9
    # the relaxation can only add what the sandwich gap allows through the output weights
    gap = pwl_sandwich("sigmoid", (0, 2), n).max_gap
    assert hi - TOY_HI <= 8 * gap + 1e-6


def test_toy_milp_full_size():
    prob = read_lp(export_milp(toy_network(), TOY_BOX))
    assert len(prob.binaries) == 200
    rows = count_rows(prob)
    assert rows["sum"] == 2 and rows["bigm"] == 800


def test_lp_round_trip_and_errors():
    text = export_milp(toy_network(), TOY_BOX, n_pieces=2)
    prob = read_lp(text)
    assert prob.sense == "max" and prob.objective == {"y0": 1.0}
    assert all(prob.bound(v)[0] is not None and prob.bound(v)[1] is not None for v in prob.variables())
    with pytest.raises(LpParseError):
        read_lp("Maximize\n obj: x\nSubject To\n c: x <=\nEnd\n")


# -- formulas ------------------------------------------------------------------


def test_phi0_faithful_at_samples():
    nn = toy_network()
    text = export_formula(nn, TOY_BOX, predicate="y0 >= 6.5")
    assert "(set-logic QF_UFNRA)" in text and "(declare-fun exp (Real) Real)" in text
    for x in _samples(TOY_BOX, 50, 0):
        res = dict(formula_residuals(text, point_model(nn, x)))
        prop = res.pop("property")
        assert max(res.values()) <= 1e-9
        # the toy output never reaches 6.5, so the property assertion fails everywhere
        assert prop > 0


def test_exp_free_faithful_at_samples():
    nn = toy_network()
    text = export_formula(nn, TOY_BOX, form="exp_free")
    assert "(exp " not in text and "(set-logic QF_NRA)" in text
    for x in _samples(TOY_BOX, 50, 1):
        res = formula_residuals(text, point_model(nn, x, "exp_free", TOY_BOX))
        assert max(r for _, r in res) <= 1e-9
    assert set(declared(text)) >= {"y0", "y1", "h0", "h1", "u0"}


def test_denominator_example():
    nn = NeuralNetwork([Layer([[0.5]], [-0.25], "sigmoid"), Layer([[1.0]], [0.0], "linear")])
    rw = formula_rewrite(nn, [Interval(0, 1)])
    assert rw.d0 == 2 and rw.r == [[1]]
    assert formula_rewrite(toy_network(), TOY_BOX).d0 == 10


def test_exp_free_guards():
    deep = NeuralNetwork([Layer([[1.0]], [0.0], "sigmoid"), Layer([[1.0]], [0.0], "sigmoid"),
                         Layer([[1.0]], [0.0], "linear")])
    with pytest.raises(ExpFreeNeedsSingleHiddenLayer):
        export_formula(deep, [Interval(0, 1)], form="exp_free")
    lin = NeuralNetwork([Layer([[1.0]], [0.0], "linear"), Layer([[1.0]], [0.0], "linear")])
    with pytest.raises(UnsupportedActivation):
        export_formula(lin, [Interval(0, 1)], form="exp_free")
    irr = NeuralNetwork([Layer([[float("nan")]], [0.0], "sigmoid"), Layer([[1.0]], [0.0], "linear")])
    with pytest.raises(NonRationalWeightGuard):
        export_formula(irr, [Interval(0, 1)], form="exp_free")


def test_smt_numbers():
    assert smt_num(Fraction(1, 2)) == "0.5"
    assert smt_num(Fraction(1, 3)) == "(/ 1 3)"
    assert smt_num(Fraction(-3, 4)) == "(- 0.75)"


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=4, max_size=4), st.integers(-20, 20),
       st.sampled_from(["sigmoid", "tanh"]))
def test_exp_free_random_weights(ws, b, act):
    W = [[ws[0] / 10, ws[1] / 4], [ws[2] / 5, ws[3] / 2]]
    nn = NeuralNetwork([Layer(W, [b / 10, -b / 20], act), Layer([[1.5, -2.0]], [0.25], "linear")])
    box = [Interval(-1, 1), Interval(0, 0.5)]
    text = export_formula(nn, box, form="exp_free")
    for x in _samples(box, 5, abs(b)):
        res = formula_residuals(text, point_model(nn, x, "exp_free", box))
        assert max(r for _, r in res) <= 1e-9
