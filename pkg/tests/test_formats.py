import json

import pytest

from microdeploy import formats
from microdeploy.formats import FormatError
from microdeploy.pipeline import builtin_email_pipeline, builtin_scale_plans
from microdeploy.plan import synthesize_plan
from microdeploy.sim import default_workload
from microdeploy.synthesis import TargetRequest, ThroughputTarget


@pytest.fixture(scope="module")
def case():
    return builtin_email_pipeline()


def test_universe_round_trip(case):
    u = case[0]
    text = formats.dump(formats.universe_to_dict(u))
    assert formats.parse_universe(text) == u


def test_configuration_round_trip(case):
    base = case[2]
    assert formats.parse_configuration(formats.dump(base.to_dict())) == base


def test_pipeline_round_trip(case):
    spec = case[1]
    assert formats.parse_pipeline(formats.dump(spec.to_dict())) == spec
    assert formats.parse_pipeline('"builtin"') == spec


def test_request_round_trip(case):
    req = TargetRequest({"MessageParser": 2}, ThroughputTarget(30_000, case[1]))
    back = formats.parse_request(formats.dump(formats.request_to_dict(req)))
    assert back.required_instances == {"MessageParser": 2}
    assert back.required_throughput.value == 30_000 and back.required_throughput.pipeline == case[1]


def test_plan_round_trip(case):
    from microdeploy.model import Configuration

    u, _, base = case
    plan = synthesize_plan(Configuration(), base, u)
    data = formats.plan_to_dict(plan)
    assert formats.parse_plan(formats.dump(data)) == plan
    bare = formats.parse_plan(json.dumps(data["actions"]))
    assert bare.actions == plan.actions and bare.source_hash is None


def test_scale_plans_round_trip(case):
    plans = builtin_scale_plans(*case)
    back = formats.parse_scale_plans(formats.dump(formats.scale_plans_to_dict(plans)))
    assert [(p.name, p.delta_capacity, dict(p.added), p.target) for p in back] == \
        [(p.name, p.delta_capacity, dict(p.added), p.target) for p in plans]


def test_workload_round_trip():
    w = default_workload()
    assert formats.parse_workload(formats.dump(formats.workload_to_dict(w))) == w


def test_unknown_field_reports_line():
    text = '{\n  "nodes": {},\n  "bogus": 1,\n  "instances": {}\n}\n'
    with pytest.raises(FormatError) as err:
        formats.parse_configuration(text, "bad.json")
    assert str(err.value).startswith("bad.json:3: unknown field 'bogus'")


def test_missing_field_and_bad_json():
    with pytest.raises(FormatError, match="instances"):
        formats.parse_configuration('{"nodes": {}}')
    with pytest.raises(FormatError):
        formats.parse_universe("{not json")


def test_bad_mode_rejected():
    text = json.dumps({"resources": ["cpu"], "nodes": [],
                       "services": [{"name": "A", "requires": [{"port": "p", "mode": "sometimes"}]}]})
    with pytest.raises(FormatError, match="mode"):
        formats.parse_universe(text)


def test_scenario_paths_resolve(tmp_path, case):
    u, spec, base = case
    (tmp_path / "u.json").write_text(formats.dump(formats.universe_to_dict(u)))
    (tmp_path / "b.json").write_text(formats.dump(base.to_dict()))
    text = json.dumps({"universe": "u.json", "pipeline": "builtin", "initial": "b.json",
                       "workload": {"points": [[0, 100]]}, "sim": {"duration": 50, "seed": 4}})
    sc = formats.parse_scenario(text, "s.json", str(tmp_path))
    assert sc["universe"] == u and sc["initial"] == base and sc["pipeline"] == spec
    assert sc["sim"].duration == 50 and sc["sim"].seed == 4 and sc["scale_plans"] is None


def test_detect_kind(case):
    u, spec, base = case
    assert formats.detect_kind(formats.universe_to_dict(u)) == "universe"
    assert formats.detect_kind(base.to_dict()) == "configuration"
    assert formats.detect_kind(spec.to_dict()) == "pipeline"
    assert formats.detect_kind({"instances": {"A": 1}}) == "request"
    assert formats.detect_kind([]) == "plan"
    assert formats.detect_kind([{"name": "x", "delta_capacity": 1}]) == "scale_plans"
    assert formats.detect_kind(42) is None
