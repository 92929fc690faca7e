from flask import Blueprint
from flask_restful import Api

from .resources import (
    RunListResource,
    RunResource,
    RunTableResource,
    ScenarioValidateResource
)

api_v1_blueprint = Blueprint("api_v1", __name__, url_prefix="/api/v1")
api_v1 = Api(api_v1_blueprint)

api_v1.add_resource(RunListResource, "/runs")
api_v1.add_resource(RunResource, "/runs/<string:name>")
api_v1.add_resource(RunTableResource, "/runs/<string:name>/tables/<string:experiment>/<string:table>")
api_v1.add_resource(ScenarioValidateResource, "/scenarios/validate")
