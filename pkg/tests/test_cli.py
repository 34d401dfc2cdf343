import csv
import os
import shutil

import pytest

from nnreach.automaton import load_automaton
from nnreach.cases import load_fixture, mountain_car_loop
from nnreach.cli import (EXIT_ERROR, EXIT_FALSIFIED, EXIT_OK, EXIT_UNKNOWN, dump_run_config,
                         exit_code, format_subdivide, load_run_config, main, parse_subdivide,
                         read_flowpipes)
from nnreach.config import ConfigError
from nnreach.encode import brute_force, read_lp
from nnreach.interval import Interval
from nnreach.verify import read_counterexample_start, simulate

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def _cfg(tmp_path, body, name="run.cfg"):
    p = tmp_path / name
    p.write_text(body)
    return str(p)


MC_POINT = """run.plant = mountain_car
run.steps = {steps}
run.out = {out}
run.jobs = 1
run.samples = 4
init.p = [-0.5, -0.5]
reach.path = functional
property.min_reward = {reward}
"""


def test_config_round_trip():
    cfg = load_run_config(open(os.path.join(CONFIGS, "mountain_car.cfg")).read(), CONFIGS)
    again = load_run_config(dump_run_config(cfg), CONFIGS)
    assert again == cfg
    assert cfg.subdivide == ("adaptive", 0.02) and cfg.init["p"] == Interval(-0.55, -0.45)
    assert parse_subdivide(format_subdivide(("uniform", 4, "p"))) == ("uniform", 4, "p")


def test_config_errors():
    with pytest.raises(ConfigError, match="network file not found"):
        load_run_config("run.plant = none\nrun.network = missing.nnet\n", "/nonexistent")
    with pytest.raises(ConfigError):
        load_run_config("run.plant = mountain_car\nreach.tm_order = 9\n")
    with pytest.raises(ConfigError):
        load_run_config("run.plant = mountain_car\nreach.bogus = 1\n")
    with pytest.raises(ConfigError):
        load_run_config("run.plant = mountain_car\nrun.steps = 0\n")


def test_exit_code_priority():
    assert exit_code(["Verified", "Verified"]) == EXIT_OK
    assert exit_code(["Verified", "Unknown"]) == EXIT_UNKNOWN
    assert exit_code(["Unknown", "Falsified"]) == EXIT_FALSIFIED


def test_usage_errors_exit_3(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_ERROR
    assert main(["verify", "--config", str(tmp_path / "nope.cfg")]) == EXIT_ERROR
    bad = _cfg(tmp_path, "run.plant = none\nrun.network = gone.nnet\n")
    assert main(["export", "milp", "--config", bad]) == EXIT_ERROR
    assert "gone.nnet" in capsys.readouterr().err


def test_unreachable_reward_is_falsified(tmp_path):
    out = tmp_path / "run"
    cfg = _cfg(tmp_path, MC_POINT.format(steps=110, out=out, reward=101))
    assert main(["verify", "--config", cfg]) == EXIT_FALSIFIED
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert rows[0]["verdict"] == "Falsified"
    cex = (out / "counterexample_0.csv").read_text()
    assert read_counterexample_start(cex)["p"] == -0.5


def test_short_horizon_is_unknown(tmp_path):
    out = tmp_path / "run"
    cfg = _cfg(tmp_path, MC_POINT.format(steps=5, out=out, reward=90).replace("run.samples = 4\n", "")
               + "property.max_steps = 200\nrun.presamples = 0\n")
    # five reach steps cannot show the goal, and no simulation of 200 steps fails
    assert main(["verify", "--config", cfg]) == EXIT_UNKNOWN
    assert os.path.exists(out / "flowpipes_0.csv") and os.path.exists(out / "run.cfg")


def test_degraded_fixture_config(tmp_path):
    out = tmp_path / "deg"
    cfg = os.path.join(CONFIGS, "mountain_car_degraded.cfg")
    assert main(["verify", "--config", cfg, "--out", str(out), "--jobs", "1"]) == EXIT_FALSIFIED
    assert any(n.startswith("counterexample_") for n in os.listdir(out))


def test_exports(tmp_path):
    shutil.copy(os.path.join(CONFIGS, "toy.nnet"), tmp_path / "toy.nnet")
    body = open(os.path.join(CONFIGS, "toy.cfg")).read().replace("export.pieces = 100", "export.pieces = 2")
    cfg = _cfg(tmp_path, body)
    lp = tmp_path / "toy.lp"
    assert main(["export", "milp", "--config", cfg, "--out", str(lp)]) == EXIT_OK
    assert brute_force(read_lp(lp.read_text())) >= 6.494424046643973 - 1e-9
    for target in ("formula-phi0", "formula-expfree"):
        f = tmp_path / f"{target}.smt2"
        assert main(["export", target, "--config", cfg, "--out", str(f)]) == EXIT_OK
        assert "(check-sat)" in f.read_text()
    auto = tmp_path / "toy.automaton"
    assert main(["transform", "--config", cfg, "--out", str(auto)]) == EXIT_OK
    h = load_automaton(auto.read_text())
    assert set(h.modes) >= {"q0", "q1", "q2"}


def test_expfree_rejects_deep_network(tmp_path, capsys):
    cfg = _cfg(tmp_path, "run.plant = mountain_car\n")
    assert main(["export", "formula-expfree", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_ERROR
    assert "ExpFreeNeedsSingleHiddenLayer" in capsys.readouterr().err


def test_plot_data_matches_simulation(tmp_path):
    out = tmp_path / "run"
    cfg = _cfg(tmp_path, MC_POINT.format(steps=20, out=out, reward=90).replace("run.samples = 4\n", "")
               + "property.max_steps = 200\nrun.presamples = 0\n")
    main(["verify", "--config", cfg])
    csv_path = tmp_path / "pv.csv"
    assert main(["plot-data", str(out), "p", "v", "--out", str(csv_path)]) == EXIT_OK
    rows = list(csv.DictReader(open(csv_path)))
    assert [int(r["step"]) for r in rows] == list(range(len(rows)))
    tr = simulate(mountain_car_loop(load_fixture("mountain_car")), {"p": -0.5, "v": 0.0, "r": 0.0}, 20)
    for r in rows:
        s = tr.states[int(r["step"])]
        assert float(r["x_lo"]) <= s["p"] <= float(r["x_hi"])
        assert float(r["y_lo"]) <= s["v"] <= float(r["y_hi"])
    # the control on the step ending at k is the input chosen at k - 1
    bounds = read_flowpipes(str(out))
    for k in range(1, 21):
        assert bounds[k]["u"].contains(tr.inputs[k - 1]["u"])
    assert main(["plot-data", str(out), "p", "nosuch"]) == EXIT_ERROR


def test_single_step_run(tmp_path):
    out = tmp_path / "one"
    cfg = _cfg(tmp_path, MC_POINT.format(steps=1, out=out, reward=90).replace("run.samples = 4\n", "")
               + "property.max_steps = 200\nrun.presamples = 0\n")
    main(["verify", "--config", cfg])
    assert main(["plot-data", str(out), "p", "v", "--out", str(tmp_path / "o.csv")]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "o.csv")))
    assert [r["step"] for r in rows] in (["1"], ["0", "1"])


def test_simulate_writes_trace(tmp_path):
    out = tmp_path / "sim"
    cfg = _cfg(tmp_path, f"run.plant = mountain_car\nrun.out = {out}\ninit.p = [-0.52, -0.48]\n")
    assert main(["simulate", "--config", cfg]) == EXIT_OK
    rows = list(csv.DictReader(open(out / "trace.csv")))
    assert float(rows[0]["p"]) == pytest.approx(-0.5)
