import csv

import pytest

from backend.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

from .conftest import scenario_text


@pytest.fixture
def write_scenario(tmp_path):
    def write(name="scenario.conf", **keys):
        path = tmp_path / name
        path.write_text(scenario_text(**keys))
        return str(path)

    return write


def test_run_writes_reports(write_scenario, out_dir, capsys):
    path = write_scenario(workload__rate=5, run__duration=5)
    assert main(["run", path, "--seed", "3", "--out", out_dir]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "goodput" in printed
    assert out_dir in printed
    with open(f"{out_dir}/summary.csv", newline="") as f:
        rows = dict(csv.reader(f))
    assert rows["metric"] == "value"
    assert int(rows["offered"]) > 0


def test_compare_tabulates_each_scenario(write_scenario, out_dir, capsys):
    plain = write_scenario("none.conf", topology__proxies=2, workload__rate=5, run__duration=5)
    guarded = write_scenario(
        "bangbang.conf", topology__proxies=2, workload__rate=5, run__duration=5, controller__name="bangbang"
    )
    assert main(["compare", plain, guarded, "--seeds", "2", "--out", out_dir]) == EXIT_OK
    assert "bangbang" in capsys.readouterr().out
    with open(f"{out_dir}/comparison.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0][:3] == ["config", "goodput_seed1", "goodput_seed2"]
    assert [row[0] for row in rows[1:]] == ["none", "bangbang"]


def test_compare_refuses_different_workloads(write_scenario, out_dir, capsys):
    slow = write_scenario("slow.conf", workload__rate=5, run__duration=5)
    fast = write_scenario("fast.conf", workload__rate=6, run__duration=5)
    assert main(["compare", slow, fast, "--seeds", "1", "--out", out_dir]) == EXIT_CONFIG
    assert "workload" in capsys.readouterr().err


def test_compare_needs_a_seed(write_scenario):
    path = write_scenario(workload__rate=5, run__duration=5)
    assert main(["compare", path, "--seeds", "0"]) == EXIT_CONFIG


def test_fluid_writes_trajectory(write_scenario, out_dir):
    path = write_scenario(topology__proxies=2, workload__rate=20, run__duration=2, run__sample_interval=0.5)
    assert main(["fluid", path, "--out", out_dir]) == EXIT_OK
    with open(f"{out_dir}/fluid.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "q1", "q2", "r2_prime"]
    assert len(rows) == 1 + 5


def test_missing_scenario_is_a_configuration_error(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nowhere.conf")]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_invalid_value_is_a_configuration_error(write_scenario, capsys):
    path = write_scenario(link__loss=1.5)
    assert main(["run", path]) == EXIT_CONFIG
    assert "link.loss" in capsys.readouterr().err


def test_unwritable_output_is_a_runtime_error(write_scenario, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = write_scenario(workload__rate=2, run__duration=2)
    assert main(["run", path, "--out", str(blocker / "out")]) == EXIT_RUNTIME
    assert capsys.readouterr().err.startswith("error:")
