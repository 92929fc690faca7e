import simplejson as json
from flask import Flask
from flask.json.provider import JSONProvider

from app.api.v1 import api_v1_blueprint
from config import Config
from labutils.io_util import custom_serializer


class SimpleJSONProvider(JSONProvider):
    def dumps(self, obj, **kwargs):
        kwargs.setdefault("ignore_nan", True)  # Convert NaN to null
        kwargs.setdefault("ensure_ascii", False)
        kwargs.setdefault("default", custom_serializer)
        return json.dumps(obj, **kwargs)

    def loads(self, s, **kwargs):
        return json.loads(s, **kwargs)


def create_app(artifact_root=None):
    app = Flask(__name__)
    app.json = SimpleJSONProvider(app)
    app.config.from_object(Config)
    if artifact_root is not None:
        app.config["ARTIFACT_ROOT"] = str(artifact_root)

    app.register_blueprint(api_v1_blueprint)

    return app
