from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from config import Config
from labutils.error_util import ConfigError
from labutils.grid_util import build_grid
from labutils.io_util import write_json
from labutils.scenario_util import (
    BoundarySpec, CoefficientSpec, build_boundary, build_coefficients, load_scenario, normalized_document,
    parse_scenario
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def _document(**changes):
    document = {
        "schema_version": 1,
        "name": "small",
        "boundary": {"type": "halfplane", "box": [-1.0, 0.0, 1.0, 2.0]},
        "h": 0.125,
        "depth": 2,
        "experiments": ["geometry"],
    }
    document.update(changes)
    return document


def test_defaults_are_filled_in() -> None:
    scenario = parse_scenario(_document(), source="inline")
    assert scenario.source == "inline"
    assert scenario.coefficients.type == "identity"
    assert scenario.solver == Config.SOLVER
    assert scenario.seed == Config.SEED
    assert scenario.eps == [0.5, 0.25, 0.125]
    assert scenario.c_cs is None
    assert scenario.boundary.box == [-1.0, 0.0, 1.0, 2.0]


@pytest.mark.parametrize("changes", [
    {"schema_version": 2},
    {"experiments": []},
    {"experiments": ["flying"]},
    {"h": 1.0},
    {"solver": "gauss"},
    {"surprise": 1},
    {"eta": 0.75},
    {"boundary": {"type": "segment", "start": [0.0, 0.0]}},
    {"boundary": {"type": "halfplane"}},
    {"boundary": {"type": "union"}},
    {"boundary": {"type": "halfplane", "box": [1.0, 0.0, -1.0, 2.0]}},
    {"coefficients": {"type": "table"}},
])
def test_invalid_documents_raise_config_errors(changes) -> None:
    with pytest.raises(ConfigError) as info:
        parse_scenario(_document(**changes))
    assert "errors" in info.value.details


def test_missing_fields_are_named() -> None:
    document = _document()
    del document["h"]
    with pytest.raises(ConfigError) as info:
        parse_scenario(document)
    assert "h" in info.value.details["errors"]
    with pytest.raises(ConfigError):
        parse_scenario(["not", "an", "object"])


def test_normalized_document_parses_again() -> None:
    scenario = parse_scenario(_document(c_cs=0.5, poles=[[0.0, 1.0]]))
    document = normalized_document(scenario)
    assert document["walkers"] == 10000
    again = parse_scenario(document)
    assert normalized_document(again) == document


def test_load_scenario_from_files(tmp_path) -> None:
    path = write_json(tmp_path / "small.json", _document())
    assert load_scenario(path).source == str(path)
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{ not json")
    with pytest.raises(ConfigError):
        load_scenario(broken)


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.json")), ids=lambda p: p.stem)
def test_bundled_scenarios_validate(path) -> None:
    scenario = load_scenario(path)
    assert scenario.name == path.stem


def test_build_every_boundary_type() -> None:
    halfplane = build_boundary(BoundarySpec(type="halfplane", box=[-1.0, 0.0, 1.0, 2.0]))
    assert halfplane.measure == pytest.approx(2.0)
    segment = build_boundary(BoundarySpec(type="segment", start=[0.0, 0.0], end=[1.0, 0.0]))
    assert segment.measure == pytest.approx(1.0)
    disk = build_boundary(BoundarySpec(type="disk", radius=1.0, n_vertices=64, box=[-1.5, -1.5, 1.5, 1.5]))
    assert disk.measure == pytest.approx(2 * np.pi, rel=0.01)
    cantor = build_boundary(BoundarySpec(type="cantor4", generation=1, include_line=True))
    assert len(cantor.squares) == 4
    union = build_boundary(BoundarySpec(type="union", parts=[
        BoundarySpec(type="segment", start=[0.0, 0.0], end=[1.0, 0.0]),
        BoundarySpec(type="segment", start=[0.0, 1.0], end=[1.0, 1.0]),
    ]))
    assert len(union.components) == 2
    assert union.measure == pytest.approx(2.0)


def test_build_coefficients(tmp_path, halfplane) -> None:
    grid = build_grid(halfplane, 0.25)
    assert build_coefficients(CoefficientSpec(), grid).descriptor == "identity"
    diagonal = build_coefficients(CoefficientSpec(type="diagonal", a11=2.0, a22=1.0), grid)
    assert np.allclose(diagonal.a11[grid.mask], 2.0)
    pd.DataFrame({"i": [1], "j": [2], "a11": [3.0], "a22": [1.0]}).to_csv(tmp_path / "a.csv", index=False)
    table = build_coefficients(CoefficientSpec(type="table", path="a.csv"), grid, base=tmp_path)
    assert table.descriptor == "table:a.csv"
    assert table.a11[2, 1] == 3.0
    assert table.identity_outside is None
