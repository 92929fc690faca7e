from pathlib import Path

from flask import current_app, request
from flask_restful import Resource
from marshmallow import ValidationError

from app.api.v1.schemas import ManifestSchema, RunSummarySchema
from app.api.v1.utilities import select_rows_from_request_args
from labutils.io_util import list_runs, load_manifest, read_table
from labutils.scenario_util import normalized_document, scenario_schema

manifest_schema = ManifestSchema()
runs_schema = RunSummarySchema(many=True)


def _artifact_root() -> Path:
    return Path(current_app.config["ARTIFACT_ROOT"])


def _run_dir(name):
    if name in (".", ".."):
        return None
    path = _artifact_root() / name
    return path if path.is_dir() else None


class RunListResource(Resource):

    def get(self):
        """
        Handle GET requests to /runs
        Lists artifact directories with optional filtering, ordering, etc.
        """
        try:
            runs = select_rows_from_request_args(list_runs(_artifact_root()), request.args.items(multi=True))
        except ValueError as err:
            return {"errors": str(err)}, 400
        return runs_schema.dump(runs.to_dict(orient="records")), 200


class RunResource(Resource):

    def get(self, name):
        """
        Handle GET requests to /runs/<name>
        Returns the run manifest
        """
        run_dir = _run_dir(name)
        manifest = load_manifest(run_dir) if run_dir is not None else None
        if manifest is None:
            return {"message": "Run not found"}, 404
        return manifest_schema.dump(manifest), 200


class RunTableResource(Resource):

    def get(self, name, experiment, table):
        """
        Handle GET requests to /runs/<name>/tables/<experiment>/<table>
        Returns a CSV table as records, filtered by the query parameters
        """
        run_dir = _run_dir(name)
        if run_dir is None or experiment in (".", ".."):
            return {"message": "Run not found"}, 404
        path = run_dir / experiment / f"{table}.csv"
        if not path.is_file():
            return {"message": "Table not found"}, 404
        frame = read_table(path)
        try:
            frame = select_rows_from_request_args(frame, request.args.items(multi=True))
        except ValueError as err:
            return {"errors": str(err)}, 400
        return frame.to_dict(orient="records"), 200


class ScenarioValidateResource(Resource):

    def post(self):
        """
        Handle POST requests to /scenarios/validate
        Validates a scenario document and returns it with every default filled in
        """
        document = request.get_json(silent=True)
        if not isinstance(document, dict):
            return {"errors": {"_schema": ["scenario must be a JSON object"]}}, 400
        try:
            scenario = scenario_schema.load(document)
        except ValidationError as err:
            return {"errors": err.messages}, 400
        return normalized_document(scenario), 200
