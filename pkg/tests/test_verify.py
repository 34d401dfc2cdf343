import pytest

from nnreach import expr as E
from nnreach.cases import load_fixture, mountain_car_loop
from nnreach.expr import Constraint
from nnreach.interval import Interval
from nnreach.neural import Layer, NeuralNetwork
from nnreach.reach import ReachSettings, run_closed_loop
from nnreach.verify import (UNKNOWN, VERIFIED, Property, _sat, check_property,
                            counterexample_csv, falsify_by_simulation, mountain_car_property,
                            read_counterexample_start, replay, sample_points, simulate, violation)

PUSH = NeuralNetwork([Layer([[0.0, 0.0]], [1.0], "linear")])
# with a constant push from p = -0.5 the car first passes -0.052 at step 43
PUSH_GOAL, PUSH_STEPS = -0.052, 43


def _box(p_lo, p_hi):
    return {"p": Interval(p_lo, p_hi), "v": Interval(0.0), "r": Interval(0.0)}


@pytest.fixture(scope="module")
def mc():
    return mountain_car_loop(load_fixture("mountain_car"))


def test_threshold_ties_count_as_satisfied():
    c = Constraint(E.Var("r"), ">=", 90.0)
    assert _sat(c, Interval(90.0, 95.0)) == "yes"
    assert _sat(c, Interval(89.0, 95.0)) == "maybe"
    assert _sat(c, Interval(80.0, 89.9)) == "no"
    assert _sat(Constraint(E.Var("x"), "<=", 1.0), Interval(0.0, 1.0)) == "yes"


def test_constant_push_reward():
    loop = mountain_car_loop(PUSH, goal=PUSH_GOAL)
    tr = simulate(loop, {"p": -0.5, "v": 0.0, "r": 0.0}, 100)
    assert tr.exit_step == PUSH_STEPS and tr.mode == "goal"
    assert tr.states[-1]["r"] == pytest.approx(100 - 0.1 * PUSH_STEPS, abs=1e-9)


def test_reward_threshold_above_achieved_is_falsified():
    loop = mountain_car_loop(PUSH, goal=PUSH_GOAL)
    achieved = 100 - 0.1 * PUSH_STEPS
    box = _box(-0.5, -0.5)
    hi = Property(100, goal="goal", min_reward=achieved + 0.05)
    cex = falsify_by_simulation(loop, box, hi, n_samples=1)
    assert cex is not None and cex.violated.startswith("reward")
    assert falsify_by_simulation(loop, box, Property(100, goal="goal", min_reward=achieved - 0.05),
                                 n_samples=1) is None


def test_reach_reward_bound_for_constant_push():
    loop = mountain_car_loop(PUSH, goal=PUSH_GOAL)
    res = run_closed_loop(loop, _box(-0.5, -0.5), 100, ReachSettings(path="functional"))
    v = check_property(res, Property(100, goal="goal", min_reward=95.0))
    assert v.status == VERIFIED and v.steps_bound == PUSH_STEPS
    assert v.reward_bound == pytest.approx(100 - 0.1 * PUSH_STEPS, abs=1e-6)


def test_position_floor_never_violated(mc):
    prop = Property(110, safety=(Constraint(E.Var("p"), ">=", -1.2),))
    assert falsify_by_simulation(mc, _box(-0.6, -0.4), prop, n_samples=10_000, seed=1) is None


def test_remainder_blowup_is_unknown(mc):
    st = ReachSettings(path="functional", max_remainder_width=1e-4)
    res = run_closed_loop(mc, _box(-0.55, -0.45), 20, st)
    v = check_property(res, mountain_car_property())
    assert v.status == UNKNOWN and v.reason.startswith("remainder_blowup")


def test_goal_not_reached_is_unknown(mc):
    res = run_closed_loop(mc, _box(-0.5, -0.5), 10, ReachSettings(path="functional"))
    v = check_property(res, mountain_car_property(max_steps=10))
    assert v.status == UNKNOWN and "goal" in v.reason


def test_reach_contains_simulations(mc):
    box = _box(-0.51, -0.5)
    res = run_closed_loop(mc, box, 40, ReachSettings(path="functional"))
    bounds = res.step_bounds()
    for x0 in sample_points(box, 30, seed=3):
        tr = simulate(mc, x0, 40)
        for k, s in enumerate(tr.states):
            if k in bounds and (tr.exit_step is None or k < tr.exit_step):
                for v in ("p", "v", "r"):
                    assert bounds[k][v].contains(s[v]), (k, v)


def test_counterexample_round_trip():
    loop = mountain_car_loop(PUSH, goal=PUSH_GOAL)
    prop = Property(30, goal="goal")
    cex = falsify_by_simulation(loop, _box(-0.5, -0.49), prop, n_samples=4)
    assert cex is not None and "not reached" in cex.violated
    text = counterexample_csv(cex)
    x0 = read_counterexample_start(text)
    assert x0 == cex.x0
    assert violation(replay(loop, cex, prop), prop) is not None


def test_sampling_is_seeded_and_corner_first():
    box = {"a": Interval(0, 1), "b": Interval(2, 3)}
    pts = list(sample_points(box, 6, seed=5))
    assert pts[:4] == [{"a": 0, "b": 2}, {"a": 0, "b": 3}, {"a": 1, "b": 2}, {"a": 1, "b": 3}]
    assert pts == list(sample_points(box, 6, seed=5))
    with pytest.raises(ValueError):
        falsify_by_simulation(None, box, Property(1), n_samples=0)

