import json
from dataclasses import replace

import numpy as np
import pytest

from elastic_biped.cli import main
from elastic_biped.harness import (
    Scenario,
    ScenarioError,
    describe,
    evaluate,
    get_scenario,
    list_scenarios,
    output_root,
    read_csv,
    run_scenario,
    write_csv,
)


def test_shipped_scenarios_cover_criteria():
    names = list_scenarios()
    assert {"pendulum_dob", "kinematic_deflection", "balance_pushes", "step_in_place", "bus_faults"} <= set(names)
    covered = {c for n in names for c in get_scenario(n).criteria}
    assert {2, 3, 4, 5, 6, 7, 8} <= covered


def test_unknown_scenario_lists_valid_names():
    with pytest.raises(ScenarioError) as exc:
        get_scenario("moonwalk")
    for n in list_scenarios():
        assert n in str(exc.value)


def test_flags_rebind_criteria():
    sc = get_scenario("kinematic_deflection")
    assert 6 in sc.bound_criteria()
    assert 6 not in replace(sc, kf=False).bound_criteria()
    assert 3 in replace(sc, rigid_limit=True).bound_criteria()


def test_describe_mentions_criteria():
    text = describe("bus_faults")
    assert "bus_faults" in text and "8" in text


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("ELASTIC_BIPED_OUT", str(tmp_path))
    assert output_root() == tmp_path
    assert output_root("elsewhere").name == "elsewhere"


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(20, 3)).tolist()
    write_csv(tmp_path / "x.csv", ["a", "b", "c"], rows)
    d = read_csv(tmp_path / "x.csv")
    assert np.array_equal(d["a"], [r[0] for r in rows])
    first = (tmp_path / "x.csv").read_bytes()
    write_csv(tmp_path / "x.csv", ["a", "b", "c"], rows)
    assert (tmp_path / "x.csv").read_bytes() == first


def test_bus_faults_end_to_end(tmp_path):
    r = run_scenario(replace(get_scenario("bus_faults"), out=str(tmp_path)))
    assert r.passed, r.verdicts
    summary = json.loads((tmp_path / "bus_faults" / "summary.json").read_text())
    assert summary["scenario"] == "bus_faults" and summary["passed"]
    # verdicts are a pure function of the CSVs on disk
    again = evaluate(get_scenario("bus_faults"), tmp_path / "bus_faults")
    assert [v.passed for v in again] == [v.passed for v in r.verdicts]


def test_evaluate_flags_tampered_output(tmp_path):
    sc = replace(get_scenario("bus_faults"), out=str(tmp_path))
    run_scenario(sc)
    (tmp_path / "bus_faults" / "determinism_2.csv").write_text("tampered\n")
    assert not any(v.passed for v in evaluate(sc, tmp_path / "bus_faults"))


def test_cli_list_and_describe(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    for n in list_scenarios():
        assert n in out
    assert main(["describe", "pendulum_dob"]) == 0


def test_cli_unknown_scenario_exit_code(capsys):
    assert main(["run", "moonwalk"]) == 2
    assert "pendulum_dob" in capsys.readouterr().err


def test_cli_run_writes_summary(tmp_path, capsys):
    assert main(["run", "bus_faults", "--out", str(tmp_path), "--seed", "3"]) == 0
    assert (tmp_path / "bus_faults" / "summary.json").exists()
    assert "bus_faults: PASS" in capsys.readouterr().out


def test_scenario_is_frozen():
    sc = get_scenario("pendulum_dob")
    assert isinstance(sc, Scenario)
    with pytest.raises(AttributeError):
        sc.seed = 3
