import dataclasses
import logging
import struct
from datetime import date, datetime
from decimal import Decimal
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import simplejson as json
import xarray as xr

from labutils.error_util import GeometryError, ParameterError
from labutils.grid_util import DiscreteField, DomainGrid

logger = logging.getLogger(__name__)

GRID_MAGIC = b"ELGR"
GRID_HEADER = struct.Struct("<4sHHddd")
FLOAT_FORMAT = "%.12g"

PathLike = Union[str, Path]


def custom_serializer(obj):
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    elif isinstance(obj, (date, datetime)):
        return obj.isoformat()
    elif isinstance(obj, Decimal):
        return float(obj)
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, pd.DataFrame):
        return obj.to_dict(orient="records")
    elif isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {obj.__class__.__name__} is not JSON serializable")


def dumps(obj: Any) -> str:
    return json.dumps(obj, ignore_nan=True, sort_keys=True, indent=2, default=custom_serializer)


def write_json(path: PathLike, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_table(path: PathLike, frame: pd.DataFrame) -> Path:
    """Write a table as RFC-4180 CSV with a fixed float format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", float_format=FLOAT_FORMAT)
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def read_table(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


def write_grid(path: PathLike, grid: DomainGrid, values: np.ndarray) -> Path:
    """
    Binary dump of a grid function: a 32-byte little-endian header followed by
    the float64 values in C order, NaN outside Ω.

    Args:
        path: Target file.
        grid: The grid the values live on.
        values: One value per Ω cell, or a full (ny, nx) array.

    Returns:
        The written path.
    """
    values = np.asarray(values, dtype=float)
    if values.shape == (grid.n_cells,):
        full = np.full((grid.ny, grid.nx), np.nan)
        rows, cols = grid.cells
        full[rows, cols] = values
    elif values.shape == (grid.ny, grid.nx):
        full = values
    else:
        raise ParameterError(f"values of shape {values.shape} do not fit a {grid.ny}x{grid.nx} grid")
    if grid.nx > 0xFFFF or grid.ny > 0xFFFF:
        raise GeometryError("grid is too large for the binary header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = GRID_HEADER.pack(GRID_MAGIC, grid.nx, grid.ny, grid.h, grid.box.x0, grid.box.y0)
    path.write_bytes(header + np.ascontiguousarray(full, dtype="<f8").tobytes())
    return path


def read_grid(path: PathLike) -> xr.DataArray:
    """Read a binary grid dump back as a DataArray with cell-center coordinates."""
    payload = Path(path).read_bytes()
    if len(payload) < GRID_HEADER.size:
        raise ParameterError(f"{path} is too short for a grid header")
    magic, nx, ny, h, x0, y0 = GRID_HEADER.unpack_from(payload)
    if magic != GRID_MAGIC:
        raise ParameterError(f"{path} is not a grid dump")
    expected = GRID_HEADER.size + 8 * nx * ny
    if len(payload) != expected:
        raise ParameterError(f"{path} has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f8", offset=GRID_HEADER.size).reshape(ny, nx).copy()
    return xr.DataArray(
        values,
        dims=("y", "x"),
        coords={"y": y0 + h * (np.arange(ny) + 0.5), "x": x0 + h * (np.arange(nx) + 0.5)},
        attrs={"h": h, "x0": x0, "y0": y0}
    )


def encode_mask(mask: np.ndarray) -> pd.DataFrame:
    """Run-length encode a boolean mask over its flattened C order."""
    flat = np.asarray(mask, dtype=bool).ravel()
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, stops = edges[::2], edges[1::2]
    return pd.DataFrame({"start": starts.astype(np.int64), "length": (stops - starts).astype(np.int64)})


def decode_mask(runs: pd.DataFrame, shape: Tuple[int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for start, length in runs[["start", "length"]].itertuples(index=False):
        if start < 0 or start + length > len(flat):
            raise ParameterError("mask run falls outside the grid")
        flat[start:start + length] = True
    return flat.reshape(shape)


def write_mask(path: PathLike, mask: np.ndarray) -> Path:
    return write_table(path, encode_mask(mask))


def read_mask(path: PathLike, shape: Tuple[int, int]) -> np.ndarray:
    return decode_mask(read_table(path), shape)


def read_coefficient_table(path: PathLike) -> pd.DataFrame:
    table = read_table(path)
    missing = {"i", "j", "a11", "a22"} - set(table.columns)
    if missing:
        raise ParameterError(f"coefficient table {path} lacks columns {sorted(missing)}")
    if ("a12" in table) != ("a21" in table):
        raise ParameterError(f"coefficient table {path} needs both a12 and a21 or neither")
    return table


def field_to_dataset(fields: Sequence[DiscreteField]) -> xr.Dataset:
    return xr.Dataset({f.array.name: f.array for f in fields})


def write_plot_script(
    csv_path: PathLike,
    x: str,
    columns: Sequence[str],
    title: str,
    logscale: str = ""
) -> Path:
    """
    Write a gnuplot script next to a curve CSV; running it renders a PNG
    beside the data.
    """
    csv_path = Path(csv_path)
    header = list(pd.read_csv(csv_path, nrows=0).columns)
    for name in [x, *columns]:
        if name not in header:
            raise ParameterError(f"{csv_path.name} has no column {name!r}")
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        f"set xlabel '{x}'",
        "set terminal pngcairo size 900,600",
        f"set output '{csv_path.stem}.png'",
    ]
    if logscale:
        lines.append(f"set logscale {logscale}")
    x_col = header.index(x) + 1
    plots = [f"'{csv_path.name}' using {x_col}:{header.index(c) + 1} with linespoints" for c in columns]
    lines.append("plot " + ", \\\n     ".join(plots))
    script = csv_path.with_suffix(".gp")
    script.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return script


def list_runs(root: PathLike) -> pd.DataFrame:
    """One row per artifact directory that holds a manifest."""
    root = Path(root)
    rows = []
    if root.is_dir():
        for manifest in sorted(root.glob("*/manifest.json")):
            data = read_json(manifest)
            rows.append({
                "name": manifest.parent.name,
                "scenario": data.get("scenario"),
                "passed": data.get("passed"),
                "checks": len(data.get("checks", [])),
            })
    return pd.DataFrame(rows, columns=["name", "scenario", "passed", "checks"])


def load_manifest(run_dir: PathLike) -> Optional[Dict[str, Any]]:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        return None
    return read_json(path)
