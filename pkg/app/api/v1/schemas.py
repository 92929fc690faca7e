from marshmallow import Schema, fields


class RunSummarySchema(Schema):
    name = fields.Str(required=True)
    scenario = fields.Str(allow_none=True)
    passed = fields.Bool(allow_none=True)
    checks = fields.Int()


class CheckSchema(Schema):
    experiment = fields.Str()
    name = fields.Str(required=True)
    passed = fields.Bool(required=True)
    value = fields.Float(allow_nan=True, allow_none=True)
    bound = fields.Float(allow_nan=True, allow_none=True)
    detail = fields.Str()


class ManifestSchema(Schema):
    scenario = fields.Str(required=True)
    schema_version = fields.Int()
    seed = fields.Int()
    passed = fields.Bool(required=True)
    experiments = fields.List(fields.Dict())
    checks = fields.List(fields.Nested(CheckSchema))
    derived = fields.Dict(keys=fields.Str(), values=fields.Str())
