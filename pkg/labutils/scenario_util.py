import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from marshmallow import (
    RAISE, Schema, ValidationError, fields, post_load, validate, validates, validates_schema
)

from config import Config
from labutils.boundary_util import (
    BoundarySet, Box, build_cantor_boundary, build_disk_boundary, build_halfplane_boundary, build_segment_boundary,
    union_boundary
)
from labutils.error_util import ConfigError
from labutils.grid_util import (
    CoefficientField, DomainGrid, coefficients_from_table, diagonal_coefficients, diagonal_radial_coefficients,
    identity_coefficients
)
from labutils.io_util import read_coefficient_table, read_json

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
BOUNDARY_TYPES = ("cantor4", "halfplane", "segment", "disk", "union")
COEFFICIENT_TYPES = ("identity", "diagonal", "diagonal-radial", "table")
EXPERIMENTS = (
    "geometry",
    "local-estimates",
    "measure-estimates",
    "poisson",
    "disk-green",
    "green-energy",
    "oracle",
    "a-infty",
    "approximator",
    "packing",
    "type4",
    "good-cover",
    "varopoulos",
    "comparison",
)


@dataclass
class BoundarySpec:
    type: str
    generation: int = 0
    include_line: bool = False
    line_offset: float = -2.0
    box: Optional[List[float]] = None
    start: Optional[List[float]] = None
    end: Optional[List[float]] = None
    radius: float = 1.0
    n_vertices: int = 512
    parts: List["BoundarySpec"] = field(default_factory=list)


@dataclass
class CoefficientSpec:
    type: str = "identity"
    a11: float = 1.0
    a22: float = 1.0
    strength: float = 1.0
    radius: float = 1.0
    path: Optional[str] = None


@dataclass
class Scenario:
    """A validated scenario file."""
    name: str
    boundary: BoundarySpec
    coefficients: CoefficientSpec
    h: float
    depth: int
    experiments: List[str]
    schema_version: int = SCHEMA_VERSION
    seed: int = Config.SEED
    solver: str = Config.SOLVER
    workers: int = Config.WORKERS
    eps: List[float] = field(default_factory=lambda: [0.5, 0.25, 0.125])
    lam: float = Config.LAMBDA
    eta: float = Config.ETA
    eps0: float = 0.25
    alphas: List[float] = field(default_factory=lambda: [4.0 ** -4, 4.0 ** -6])
    m: float = 4.0
    k0: float = 4.0
    kappa_factor: float = Config.KAPPA_FACTOR
    tau: float = Config.TAU
    theta0: float = 0.125
    c_cs: Optional[float] = None
    walkers: int = 10000
    generations: List[int] = field(default_factory=list)
    depths: List[int] = field(default_factory=list)
    poles: List[List[float]] = field(default_factory=list)
    iterations: int = 6
    source: Optional[str] = None


class BoundarySpecSchema(Schema):
    class Meta:
        unknown = RAISE

    type = fields.Str(required=True, validate=validate.OneOf(BOUNDARY_TYPES))
    generation = fields.Int(load_default=0, validate=validate.Range(min=0, max=8))
    include_line = fields.Bool(load_default=False)
    line_offset = fields.Float(load_default=-2.0)
    box = fields.List(fields.Float(), validate=validate.Length(equal=4), load_default=None)
    start = fields.List(fields.Float(), validate=validate.Length(equal=2), load_default=None)
    end = fields.List(fields.Float(), validate=validate.Length(equal=2), load_default=None)
    radius = fields.Float(load_default=1.0, validate=validate.Range(min=0, min_inclusive=False))
    n_vertices = fields.Int(load_default=512, validate=validate.Range(min=8))
    parts = fields.List(fields.Nested(lambda: BoundarySpecSchema()), load_default=list)

    @validates("box")
    def validate_box(self, value, **kwargs):
        if value is not None and (value[2] <= value[0] or value[3] <= value[1]):
            raise ValidationError("box must be [x0, y0, x1, y1] with x0 < x1 and y0 < y1")

    @validates_schema
    def validate_shape(self, data, **kwargs):
        kind = data["type"]
        if kind == "segment" and (data.get("start") is None or data.get("end") is None):
            raise ValidationError("segment boundaries need start and end", "start")
        if kind == "halfplane" and data.get("box") is None:
            raise ValidationError("halfplane boundaries need a box", "box")
        if kind == "union" and not data.get("parts"):
            raise ValidationError("union boundaries need parts", "parts")

    @post_load
    def make(self, data, **kwargs):
        return BoundarySpec(**data)


class CoefficientSpecSchema(Schema):
    class Meta:
        unknown = RAISE

    type = fields.Str(load_default="identity", validate=validate.OneOf(COEFFICIENT_TYPES))
    a11 = fields.Float(load_default=1.0, validate=validate.Range(min=0, min_inclusive=False))
    a22 = fields.Float(load_default=1.0, validate=validate.Range(min=0, min_inclusive=False))
    strength = fields.Float(load_default=1.0, validate=validate.Range(min=0))
    radius = fields.Float(load_default=1.0, validate=validate.Range(min=0, min_inclusive=False))
    path = fields.Str(load_default=None)

    @validates_schema
    def validate_table(self, data, **kwargs):
        if data["type"] == "table" and not data.get("path"):
            raise ValidationError("table coefficients need a path", "path")

    @post_load
    def make(self, data, **kwargs):
        return CoefficientSpec(**data)


class ScenarioSchema(Schema):
    class Meta:
        unknown = RAISE

    schema_version = fields.Int(required=True)
    name = fields.Str(required=True, validate=validate.Length(min=1))
    boundary = fields.Nested(BoundarySpecSchema, required=True)
    coefficients = fields.Nested(CoefficientSpecSchema, load_default=lambda: CoefficientSpec())
    h = fields.Float(required=True, validate=validate.Range(min=2.0 ** -12, max=0.5))
    depth = fields.Int(required=True, validate=validate.Range(min=0, max=14))
    experiments = fields.List(fields.Str(validate=validate.OneOf(EXPERIMENTS)), required=True,
                              validate=validate.Length(min=1))
    seed = fields.Int(load_default=Config.SEED, validate=validate.Range(min=0))
    solver = fields.Str(load_default=Config.SOLVER, validate=validate.OneOf(("splu", "cg", "bicgstab")))
    workers = fields.Int(load_default=Config.WORKERS, validate=validate.Range(min=1, max=64))
    eps = fields.List(fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False)),
                      load_default=lambda: [0.5, 0.25, 0.125])
    lam = fields.Float(load_default=Config.LAMBDA, validate=validate.Range(min=0, max=0.125, min_inclusive=False))
    eta = fields.Float(load_default=Config.ETA, validate=validate.Range(min=0, max=0.5, min_inclusive=False))
    eps0 = fields.Float(load_default=0.25, validate=validate.Range(min=0, max=0.36, min_inclusive=False))
    alphas = fields.List(fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False)),
                         load_default=lambda: [4.0 ** -4, 4.0 ** -6])
    m = fields.Float(load_default=4.0, validate=validate.Range(min=1, min_inclusive=False))
    k0 = fields.Float(load_default=4.0, validate=validate.Range(min=1))
    kappa_factor = fields.Float(load_default=Config.KAPPA_FACTOR, validate=validate.Range(min=1))
    tau = fields.Float(load_default=Config.TAU, validate=validate.Range(min=0, max=0.5, min_inclusive=False, max_inclusive=False))
    theta0 = fields.Float(load_default=0.125, validate=validate.Range(min=0, max=1, min_inclusive=False))
    c_cs = fields.Float(load_default=None, validate=validate.Range(min=0, max=1, min_inclusive=False))
    walkers = fields.Int(load_default=10000, validate=validate.Range(min=1, max=10 ** 7))
    generations = fields.List(fields.Int(validate=validate.Range(min=0, max=8)), load_default=list)
    depths = fields.List(fields.Int(validate=validate.Range(min=0, max=14)), load_default=list)
    poles = fields.List(fields.List(fields.Float(), validate=validate.Length(equal=2)), load_default=list)
    iterations = fields.Int(load_default=6, validate=validate.Range(min=1, max=10))

    @validates("schema_version")
    def validate_version(self, value, **kwargs):
        if value != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema version {value}, expected {SCHEMA_VERSION}")

    @post_load
    def make(self, data, **kwargs):
        return Scenario(**data)


scenario_schema = ScenarioSchema()


def parse_scenario(document: Dict[str, Any], source: Optional[str] = None) -> Scenario:
    """
    Validate a scenario document.

    Args:
        document: The decoded JSON object.
        source: Where it came from, kept on the result.

    Returns:
        The Scenario.

    Raises:
        ConfigError: The document does not validate.
    """
    if not isinstance(document, dict):
        raise ConfigError("scenario must be a JSON object", {"source": source})
    try:
        scenario = scenario_schema.load(document)
    except ValidationError as err:
        raise ConfigError(f"invalid scenario {source or document.get('name', '?')}", {"errors": err.messages}) from err
    scenario.source = source
    return scenario


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    try:
        document = read_json(path)
    except FileNotFoundError as err:
        raise ConfigError(f"scenario file {path} does not exist") from err
    except ValueError as err:
        raise ConfigError(f"scenario file {path} is not valid JSON", {"error": str(err)}) from err
    return parse_scenario(document, source=str(path))


def normalized_document(scenario: Scenario) -> Dict[str, Any]:
    """The scenario as a plain document with every default filled in."""
    return scenario_schema.dump(scenario)


def build_boundary(spec: BoundarySpec) -> BoundarySet:
    box = Box(*spec.box) if spec.box is not None else None
    if spec.type == "cantor4":
        return build_cantor_boundary(spec.generation, include_line=spec.include_line, line_offset=spec.line_offset, box=box)
    if spec.type == "halfplane":
        return build_halfplane_boundary(box)
    if spec.type == "segment":
        return build_segment_boundary(spec.start, spec.end, box=box)
    if spec.type == "disk":
        return build_disk_boundary(spec.radius, spec.n_vertices, box=box)
    return union_boundary([build_boundary(part) for part in spec.parts], box=box)


def build_coefficients(spec: CoefficientSpec, grid: DomainGrid, base: Optional[Path] = None) -> CoefficientField:
    if spec.type == "identity":
        return identity_coefficients(grid)
    if spec.type == "diagonal":
        return diagonal_coefficients(grid, spec.a11, spec.a22)
    if spec.type == "diagonal-radial":
        return diagonal_radial_coefficients(grid, spec.strength, spec.radius)
    path = Path(spec.path)
    if base is not None and not path.is_absolute():
        path = base / path
    return coefficients_from_table(grid, read_coefficient_table(path), descriptor=f"table:{path.name}")
