import json
import math
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from pwa_shield.cli import EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from pwa_shield.scenarios import corridor_scenario, save_scenario


def schema(name):
    return json.loads((resources.files("pwa_shield") / "schemas" / f"{name}.schema.json").read_text())


def run(*argv):
    return main([str(a) for a in argv])


# -- simulate -------------------------------------------------------------------


def test_simulate_writes_files_and_validates(tmp_path, capsys):
    assert run("simulate", "--scenario", "corridor", "--runs", 8, "--out", tmp_path) == EXIT_OK
    summary = json.loads((tmp_path / "summary.json").read_text())
    jsonschema.validate(summary, schema("summary"))
    jsonschema.validate(json.loads((tmp_path / "timing.json").read_text()), schema("timing"))
    assert summary["runs"] == 8
    assert "P_hat" in capsys.readouterr().out
    assert not (tmp_path / "trajectories").exists()


def test_single_run_dumps_one_trajectory(tmp_path):
    assert run("simulate", "--scenario", "corridor", "--runs", 1, "--out", tmp_path) == EXIT_OK
    assert [p.name for p in (tmp_path / "trajectories").iterdir()] == ["seed_0.csv"]


def test_simulate_reruns_are_byte_identical(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out, par in ((a, 1), (b, 1), (c, 2)):
        assert run("simulate", "--scenario", "corridor", "--runs", 12, "--seed", 4,
                   "--out", out, "--parallel", par, "--trajectories") == EXIT_OK
    for name in ("runs.csv", "summary.json", "trajectories/seed_9.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes() == (c / name).read_bytes()


def test_simulate_infeasible_exit_code(tmp_path):
    s = corridor_scenario(sigma=0.09, epsilon=1e-9)
    save_scenario(s, tmp_path / "tight.json")
    code = run("simulate", "--scenario", tmp_path / "tight.json", "--runs", 2, "--out", tmp_path / "o")
    assert code == EXIT_INFEASIBLE
    code = run("simulate", "--scenario", tmp_path / "tight.json", "--runs", 2, "--out", tmp_path / "o",
               "--fallback-hold-input")
    assert code == EXIT_OK


def test_config_errors(tmp_path, capsys):
    assert run("simulate", "--scenario", "nonexistent", "--out", tmp_path) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text('{"name": "x"}')
    assert run("validate-scenario", "--scenario", tmp_path / "bad.json") == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_dataset_flag_with_header(tmp_path):
    rows = np.random.default_rng(0).normal(scale=0.03, size=(3000, 3))
    rows[:, [0, 2]] = 0.0
    path = tmp_path / "xi.csv"
    np.savetxt(path, rows, delimiter=",", header="a,b,c", comments="")
    args = ["simulate", "--scenario", "corridor_data_driven", "--runs", 3,
            "--out", tmp_path / "o", "--dataset", path]
    assert run(*args, "--header") == EXIT_OK
    assert run(*args) == EXIT_CONFIG  # the header row is not numeric


def test_dataset_needs_confidence(tmp_path):
    np.savetxt(tmp_path / "xi.csv", np.zeros((100, 3)), delimiter=",")
    assert run("simulate", "--scenario", "corridor", "--dataset", tmp_path / "xi.csv",
               "--out", tmp_path / "o") == EXIT_CONFIG


# -- filter-step ---------------------------------------------------------------


def test_filter_step_prints_result(tmp_path, capsys):
    qp_path = tmp_path / "qp.json"
    assert run("filter-step", "--scenario", "corridor", "--state", "0,0.45,0",
               "--dump-qp", qp_path) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["feasible"] and doc["assignment"] == [0, 0] and doc["qp_count"] == 1
    assert len(doc["margins"]) == 2 and doc["u"][1] < 0
    dumped = json.loads(qp_path.read_text())
    assert dumped["assignment"] == [0, 0] and len(dumped["problem"]["A"]) == 2


def test_filter_step_is_deterministic(capsys):
    outs = []
    for _ in range(2):
        run("filter-step", "--scenario", "obstacle_course", "--state", "2.0,0.1,0", "--method", "exact")
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1]


def test_filter_step_bad_state():
    assert run("filter-step", "--scenario", "corridor", "--state", "0,0") == EXIT_CONFIG


def test_filter_step_data_driven(capsys):
    assert run("filter-step", "--scenario", "corridor_data_driven", "--seed", 3) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["feasible"]


# -- min-samples -----------------------------------------------------------------


def min_samples_json(capsys, *args):
    assert run("min-samples", *args, "--json") == EXIT_OK
    return json.loads(capsys.readouterr().out)


def test_min_samples_single_step(capsys):
    r = min_samples_json(capsys, "--epsilon", 0.1, "--horizon", 1, "--confidence", 0.5)
    assert r["delta"] == pytest.approx(0.1, rel=1e-15)
    assert r["d_min"] == pytest.approx(math.log(0.5) / math.log(0.9), rel=1e-14)
    assert r["required_n"] == 7


def test_min_samples_corridor(capsys):
    r = min_samples_json(capsys, "--epsilon", 0.5, "--horizon", 20, "--confidence", 0.2,
                         "--n-polyhedra", 2, "--facets-total", 2, "--n", 2580)
    assert r["gamma"] == 0.2 and r["gamma_per_facet"] == 0.1
    assert r["required_n"] <= 2580 and 1 <= r["tau"] <= 2580
    g = min_samples_json(capsys, "--epsilon", 0.5, "--horizon", 20, "--confidence", 0.2,
                         "--n-polyhedra", 2, "--facets-total", 2, "--mode", "general")
    assert g["gamma"] == pytest.approx(0.01) and g["required_n"] <= 2580


def test_min_samples_text_and_warning(capsys, caplog):
    assert run("min-samples", "--epsilon", 1e-6, "--horizon", 150, "--confidence", 1e-4,
               "--n", 10) == EXIT_OK
    out = capsys.readouterr().out
    assert "required n" in out and "undefined" in out
    assert any("exceeds" in rec.message for rec in caplog.records)


# -- validate / benchmark ----------------------------------------------------------


def test_validate_scenario(capsys):
    assert run("validate-scenario", "--scenario", "obstacle_course") == EXIT_OK
    assert "13 polyhedra" in capsys.readouterr().out


def test_benchmark(tmp_path, capsys):
    assert run("benchmark", "--scenario", "obstacle_course", "--runs", 1, "--horizon", 40,
               "--out", tmp_path) == EXIT_OK
    report = json.loads((tmp_path / "benchmark.json").read_text())
    assert report["steps"] == 40 and report["frac_exact_dominates"] == 1.0
    steps = (tmp_path / "steps.csv").read_bytes()
    assert run("benchmark", "--scenario", "obstacle_course", "--runs", 1, "--horizon", 40,
               "--out", tmp_path / "again") == EXIT_OK
    assert (tmp_path / "again" / "steps.csv").read_bytes() == steps


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "pwa_shield.cli", "min-samples", "--epsilon", "0.1",
                          "--horizon", "1", "--confidence", "0.5"], capture_output=True, text=True)
    assert out.returncode == 0 and "required n = 7" in out.stdout
