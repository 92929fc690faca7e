import numpy as np
import pandas as pd
import pytest

from labutils.error_util import ParameterError
from labutils.io_util import (
    decode_mask, dumps, encode_mask, list_runs, load_manifest, read_coefficient_table, read_grid, read_json,
    read_mask, write_grid, write_json, write_mask, write_plot_script, write_table
)


def test_dumps_handles_numpy_and_nan() -> None:
    text = dumps({"a": np.int64(3), "b": np.float32(0.5), "c": np.array([1, 2]), "d": float("nan"), "e": np.bool_(True)})
    assert '"a": 3' in text
    assert '"d": null' in text
    assert '"e": true' in text


def test_json_files(tmp_path) -> None:
    path = write_json(tmp_path / "nested" / "report.json", {"values": np.arange(3)})
    assert read_json(path) == {"values": [0, 1, 2]}


def test_tables_use_a_fixed_float_format(tmp_path) -> None:
    path = write_table(tmp_path / "t.csv", pd.DataFrame({"x": [1.0 / 3], "n": [2]}))
    assert path.read_text().splitlines() == ["x,n", "0.333333333333,2"]


def test_mask_runs() -> None:
    mask = np.array([[True, True, False], [False, True, True]])
    runs = encode_mask(mask)
    assert runs["start"].tolist() == [0, 4]
    assert runs["length"].tolist() == [2, 2]
    assert np.array_equal(decode_mask(runs, mask.shape), mask)
    assert len(encode_mask(np.zeros((2, 2), dtype=bool))) == 0
    with pytest.raises(ParameterError):
        decode_mask(pd.DataFrame({"start": [5], "length": [2]}), mask.shape)


def test_mask_files(tmp_path, halfplane_grid) -> None:
    path = write_mask(tmp_path / "mask.csv", halfplane_grid.mask)
    assert np.array_equal(read_mask(path, halfplane_grid.mask.shape), halfplane_grid.mask)


def test_grid_dump_reads_back_as_a_data_array(tmp_path, halfplane_grid) -> None:
    values = halfplane_grid.centers[:, 0] + 2 * halfplane_grid.centers[:, 1]
    path = write_grid(tmp_path / "u.bin", halfplane_grid, values)
    assert path.stat().st_size == 32 + 8 * halfplane_grid.nx * halfplane_grid.ny
    array = read_grid(path)
    assert array.shape == (halfplane_grid.ny, halfplane_grid.nx)
    assert array.attrs["h"] == pytest.approx(halfplane_grid.h)
    point = array.sel(x=0.015625, y=0.015625).item()
    assert point == pytest.approx(0.015625 * 3)
    with pytest.raises(ParameterError):
        write_grid(tmp_path / "bad.bin", halfplane_grid, np.zeros(7))


def test_grid_dump_rejects_foreign_files(tmp_path) -> None:
    path = tmp_path / "junk.bin"
    path.write_bytes(b"x" * 40)
    with pytest.raises(ParameterError):
        read_grid(path)
    path.write_bytes(b"x")
    with pytest.raises(ParameterError):
        read_grid(path)


def test_coefficient_table_columns(tmp_path) -> None:
    path = tmp_path / "coefficients.csv"
    pd.DataFrame({"i": [0], "j": [0], "a11": [2.0], "a22": [1.0]}).to_csv(path, index=False)
    assert len(read_coefficient_table(path)) == 1
    pd.DataFrame({"i": [0], "j": [0], "a11": [2.0]}).to_csv(path, index=False)
    with pytest.raises(ParameterError):
        read_coefficient_table(path)
    pd.DataFrame({"i": [0], "j": [0], "a11": [2.0], "a22": [1.0], "a12": [0.1]}).to_csv(path, index=False)
    with pytest.raises(ParameterError):
        read_coefficient_table(path)


def test_plot_script_points_at_the_columns(tmp_path) -> None:
    path = write_table(tmp_path / "curve.csv", pd.DataFrame({"depth": [1, 2], "norm": [0.5, 0.25]}))
    script = write_plot_script(path, "depth", ["norm"], "norm per depth", logscale="y")
    text = script.read_text()
    assert "using 1:2" in text
    assert "set logscale y" in text
    assert "curve.png" in text
    with pytest.raises(ParameterError):
        write_plot_script(path, "depth", ["missing"], "x")


def test_run_listing(tmp_path) -> None:
    assert list_runs(tmp_path / "nothing").empty
    write_json(tmp_path / "b" / "manifest.json", {"scenario": "b", "passed": False, "checks": [{}, {}]})
    write_json(tmp_path / "a" / "manifest.json", {"scenario": "a", "passed": True, "checks": []})
    (tmp_path / "stray").mkdir()
    runs = list_runs(tmp_path)
    assert runs["name"].tolist() == ["a", "b"]
    assert runs["checks"].tolist() == [0, 2]
    assert load_manifest(tmp_path / "a")["passed"] is True
    assert load_manifest(tmp_path / "stray") is None
