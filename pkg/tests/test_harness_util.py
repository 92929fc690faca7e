import numpy as np
import pytest

from labutils.error_util import ParameterError
from labutils.harness_util import REGISTRY, CheckResult, lacunary_sign, report_directory, run_scenario
from labutils.io_util import read_json
from labutils.scenario_util import EXPERIMENTS, parse_scenario


def _scenario(name, boundary, h, depth, experiments):
    return parse_scenario({
        "schema_version": 1,
        "name": name,
        "boundary": boundary,
        "h": h,
        "depth": depth,
        "experiments": experiments,
    })


def test_every_scenario_experiment_is_registered() -> None:
    assert set(REGISTRY) == set(EXPERIMENTS)


def test_check_results() -> None:
    assert CheckResult.at_most("x", 1.0, 2.0).passed
    assert not CheckResult.at_most("x", float("nan"), 2.0).passed
    assert not CheckResult.at_least("x", 1.0, 2.0).passed
    flag = CheckResult.holds("x", False, "detail")
    assert (flag.passed, flag.value, flag.detail) == (False, 0.0, "detail")


def test_lacunary_sign() -> None:
    x = np.array([0.25, -0.25, 0.0])
    assert lacunary_sign(x, 1).tolist() == [1.0, -1.0, 1.0]
    assert set(lacunary_sign(np.linspace(-1, 1, 101), 5)) <= {-1.0, 1.0}


def test_geometry_run_writes_its_artifacts(tmp_path) -> None:
    scenario = _scenario("geometry-small", {"type": "halfplane", "box": [-1.0, 0.0, 1.0, 2.0]}, 1.0 / 32, 4,
                         ["geometry"])
    run = run_scenario(scenario, tmp_path / "geometry-small")
    out = tmp_path / "geometry-small"
    manifest = read_json(out / "manifest.json")
    assert manifest["scenario"] == "geometry-small"
    assert manifest["passed"] == run.passed
    assert [e["name"] for e in manifest["experiments"]] == ["geometry"]
    assert "cubes" in manifest["experiments"][0]["tables"]
    assert (out / "geometry" / "cubes.csv").is_file()
    assert (out / "geometry" / "report.json").is_file()
    assert read_json(out / "scenario.json")["name"] == "geometry-small"
    assert set(manifest["derived"].values()) == {"geometry"}
    checks = report_directory(out)
    assert len(checks) == len(manifest["checks"])
    assert list(checks.columns) == ["experiment", "name", "passed", "value", "bound", "detail"]
    assert report_directory(tmp_path)["name"].tolist() == ["geometry-small"]


def test_failed_experiments_are_recorded(tmp_path) -> None:
    scenario = _scenario("disk-poisson", {"type": "disk", "radius": 1.0, "n_vertices": 64}, 0.125, 2, ["poisson"])
    run = run_scenario(scenario, tmp_path, checks_only=True)
    assert not run.passed
    failures = read_json(tmp_path / "failures.json")
    assert failures[0]["experiment"] == "poisson"
    assert failures[0]["name"] == "completed"
    assert "ParameterError" in failures[0]["detail"]
    assert not (tmp_path / "poisson").exists()


def test_unknown_experiments_and_empty_directories(tmp_path) -> None:
    scenario = _scenario("x", {"type": "halfplane", "box": [-1.0, 0.0, 1.0, 2.0]}, 0.125, 2, ["geometry"])
    with pytest.raises(ParameterError):
        run_scenario(scenario, tmp_path, experiments=["flying"])
    with pytest.raises(ParameterError):
        report_directory(tmp_path / "empty")
