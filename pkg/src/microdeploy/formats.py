"""JSON readers and writers for universes, configurations, requests, plans and scenarios.

Readers are strict: unknown or missing fields are errors, reported with the
line of the input where the offending key (or the syntax error) sits.
"""

from __future__ import annotations

import json
import os
from typing import Optional

from .model import (
    Binding,
    Configuration,
    MicroserviceType,
    NodeType,
    Placement,
    ProvidedPort,
    Requirement,
    ResourceKind,
    Universe,
)
from .pipeline import PipelineSpec, ScalePlan, Stage, email_pipeline
from .plan import Bind, CreateNode, DeleteNode, Deploy, DeploymentPlan, Unbind, Undeploy, action_to_dict
from .synthesis import TargetRequest, ThroughputTarget


class FormatError(Exception):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<input>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line
        self.message = message
        self.source = source


class _Ctx:
    def __init__(self, text: str, source: str):
        self.lines = text.splitlines()
        self.source = source

    def line_of(self, key) -> Optional[int]:
        needle = json.dumps(key) if isinstance(key, str) else None
        if needle is None:
            return None
        for k, line in enumerate(self.lines, start=1):
            if needle in line:
                return k
        return None

    def fail(self, message, key=None):
        raise FormatError(message, self.line_of(key) if key is not None else None, self.source)

    def obj(self, data, what, required=(), optional=(), key=None):
        if not isinstance(data, dict):
            self.fail(f"{what} must be an object", key)
        for k in data:
            if k not in required and k not in optional:
                self.fail(f"unknown field {k!r} in {what}", k)
        for k in required:
            if k not in data:
                self.fail(f"{what} is missing field {k!r}", key)
        return data

    def seq(self, data, what, key=None):
        if not isinstance(data, list):
            self.fail(f"{what} must be an array", key)
        return data

    def string(self, data, what, key=None):
        if not isinstance(data, str) or not data:
            self.fail(f"{what} must be a non-empty string", key)
        return data

    def integer(self, data, what, key=None, minimum=0):
        if isinstance(data, bool) or not isinstance(data, int) or data < minimum:
            self.fail(f"{what} must be an integer >= {minimum}", key)
        return data

    def number(self, data, what, key=None, minimum=0.0):
        if isinstance(data, bool) or not isinstance(data, (int, float)) or data < minimum:
            self.fail(f"{what} must be a number >= {minimum}", key)
        return data

    def int_map(self, data, what, key=None):
        self.obj(data, what, optional=tuple(data) if isinstance(data, dict) else (), key=key)
        return {k: self.integer(v, f"{what}[{k!r}]", k) for k, v in data.items()}


def _load(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.lineno, source) from None


def read_text(path) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def dump(data) -> str:
    return json.dumps(data, indent=2, sort_keys=False) + "\n"


# -- universe ------------------------------------------------------------------

def universe_to_dict(u: Universe) -> dict:
    def cap(c):
        return "unbounded" if c is None else c
    return {
        "resources": [{"name": r.name, "unit": r.unit} for r in u.resources],
        "services": [
            {
                "name": s.name,
                "provides": [{"port": p.port, "capacity": cap(p.capacity)} for p in s.provides],
                "requires": [{"port": r.port, "arity": r.arity, "mode": r.mode.value} for r in s.requires],
                "consumption": dict(s.consumption),
                "max_load": s.max_load,
            }
            for s in u.service_types
        ],
        "nodes": [{"name": n.name, "cost": n.cost, "capacity": dict(n.capacity)} for n in u.node_types],
    }


def universe_from_dict(data, ctx: _Ctx) -> Universe:
    ctx.obj(data, "universe", ("resources", "services", "nodes"))
    resources = []
    for r in ctx.seq(data["resources"], "resources", "resources"):
        if isinstance(r, str):
            resources.append(ResourceKind(r))
        else:
            ctx.obj(r, "resource", ("name",), ("unit",), "resources")
            resources.append(ResourceKind(ctx.string(r["name"], "resource name", "name"), r.get("unit", "")))
    services = []
    for s in ctx.seq(data["services"], "services", "services"):
        ctx.obj(s, "service", ("name",), ("provides", "requires", "consumption", "max_load"), "services")
        name = ctx.string(s["name"], "service name", "name")
        provides = []
        for p in ctx.seq(s.get("provides", []), f"{name}.provides", "provides"):
            ctx.obj(p, f"{name} provided port", ("port",), ("capacity",), name)
            c = p.get("capacity", "unbounded")
            c = None if c == "unbounded" else ctx.integer(c, f"{name} port capacity", p["port"])
            provides.append(ProvidedPort(ctx.string(p["port"], "port", name), c))
        requires = []
        for r in ctx.seq(s.get("requires", []), f"{name}.requires", "requires"):
            ctx.obj(r, f"{name} requirement", ("port", "mode"), ("arity",), name)
            if r["mode"] not in ("strong", "weak"):
                ctx.fail(f"{name}: mode must be 'strong' or 'weak'", r["mode"])
            arity = ctx.integer(r.get("arity", 1), f"{name} arity", r["port"])
            try:
                requires.append(Requirement(ctx.string(r["port"], "port", name), arity, r["mode"]))
            except ValueError as exc:
                ctx.fail(f"{name}: {exc}", r["port"])
        cons = ctx.int_map(s.get("consumption", {}), f"{name}.consumption", "consumption")
        load = ctx.number(s.get("max_load", 1.0), f"{name}.max_load", "max_load")
        services.append(MicroserviceType(name, provides, requires, cons, load))
    nodes = []
    for n in ctx.seq(data["nodes"], "nodes", "nodes"):
        ctx.obj(n, "node type", ("name", "cost", "capacity"), (), "nodes")
        name = ctx.string(n["name"], "node type name", "name")
        nodes.append(NodeType(name, ctx.number(n["cost"], f"{name}.cost", name),
                              ctx.int_map(n["capacity"], f"{name}.capacity", name)))
    return Universe(resources, services, nodes)


def parse_universe(text: str, source: str = "<universe>") -> Universe:
    ctx = _Ctx(text, source)
    return universe_from_dict(_load(text, source), ctx)


# -- configuration -------------------------------------------------------------

def config_from_dict(data, ctx: _Ctx) -> Configuration:
    ctx.obj(data, "configuration", ("nodes", "instances"), ("bindings",))
    nodes = ctx.obj(data["nodes"], "nodes", optional=tuple(data["nodes"]) if isinstance(data["nodes"], dict) else ())
    for k, v in nodes.items():
        ctx.string(v, f"type of node {k!r}", k)
    insts = data["instances"]
    ctx.obj(insts, "instances", optional=tuple(insts) if isinstance(insts, dict) else ())
    instances = {}
    for k, v in insts.items():
        ctx.obj(v, f"instance {k!r}", ("type", "node"), (), k)
        instances[k] = Placement(ctx.string(v["type"], "instance type", k), ctx.string(v["node"], "instance node", k))
    bindings = []
    for b in ctx.seq(data.get("bindings", []), "bindings", "bindings"):
        ctx.obj(b, "binding", ("port", "requirer", "provider"), (), "bindings")
        bindings.append(Binding(ctx.string(b["port"], "binding port", "port"),
                                ctx.string(b["requirer"], "binding requirer", "requirer"),
                                ctx.string(b["provider"], "binding provider", "provider")))
    return Configuration(dict(nodes), instances, bindings)


def parse_configuration(text: str, source: str = "<configuration>") -> Configuration:
    return config_from_dict(_load(text, source), _Ctx(text, source))


# -- pipeline ------------------------------------------------------------------

def pipeline_from_dict(data, ctx: _Ctx) -> PipelineSpec:
    if data == "builtin":
        return email_pipeline()
    ctx.obj(data, "pipeline", ("entry", "stages", "routes"))
    stages = []
    for s in ctx.seq(data["stages"], "stages", "stages"):
        ctx.obj(s, "stage", ("name", "service", "balancer"), (), "stages")
        stages.append(Stage(s["name"], s["service"], s["balancer"]))
    routes = []
    for r in ctx.seq(data["routes"], "routes", "routes"):
        ctx.obj(r, "route", ("from", "to", "probability"), (), "routes")
        routes.append((r["from"], r["to"], ctx.number(r["probability"], "probability", "probability")))
    try:
        return PipelineSpec(stages, routes, data["entry"])
    except Exception as exc:
        ctx.fail(str(exc), "routes")


def parse_pipeline(text: str, source: str = "<pipeline>") -> PipelineSpec:
    return pipeline_from_dict(_load(text, source), _Ctx(text, source))


# -- request -------------------------------------------------------------------

def request_to_dict(req: TargetRequest) -> dict:
    out = {"instances": dict(req.required_instances)}
    if req.required_throughput is not None:
        out["throughput"] = {"value": req.required_throughput.value,
                             "pipeline": req.required_throughput.pipeline.to_dict()}
    return out


def parse_request(text: str, source: str = "<request>") -> TargetRequest:
    ctx = _Ctx(text, source)
    data = _load(text, source)
    ctx.obj(data, "request", (), ("instances", "throughput"))
    counts = ctx.int_map(data.get("instances", {}), "instances", "instances")
    tp = None
    if "throughput" in data:
        t = ctx.obj(data["throughput"], "throughput", ("value",), ("pipeline",), "throughput")
        tp = ThroughputTarget(ctx.number(t["value"], "throughput value", "value"),
                              pipeline_from_dict(t.get("pipeline", "builtin"), ctx))
    try:
        return TargetRequest(counts, tp)
    except ValueError as exc:
        ctx.fail(str(exc))


# -- plans ---------------------------------------------------------------------

_ACTION_FIELDS = {
    "create_node": ("node", "node_type"),
    "delete_node": ("node",),
    "deploy": ("instance", "type", "node"),
    "bind": ("port", "requirer", "provider"),
    "unbind": ("port", "requirer", "provider"),
    "undeploy": ("instance",),
}


def plan_to_dict(plan: DeploymentPlan) -> dict:
    return {"source_hash": plan.source_hash, "target_hash": plan.target_hash,
            "actions": [action_to_dict(a) for a in plan.actions]}


def parse_plan(text: str, source: str = "<plan>") -> DeploymentPlan:
    ctx = _Ctx(text, source)
    data = _load(text, source)
    if isinstance(data, list):
        data = {"actions": data}
    ctx.obj(data, "plan", ("actions",), ("source_hash", "target_hash"))
    actions = []
    for a in ctx.seq(data["actions"], "actions", "actions"):
        if not isinstance(a, dict) or a.get("action") not in _ACTION_FIELDS:
            ctx.fail(f"action must be an object with 'action' in {sorted(_ACTION_FIELDS)}", "action")
        kind = a["action"]
        extra = ("bindings",) if kind == "deploy" else ()
        ctx.obj(a, f"{kind} action", ("action",) + _ACTION_FIELDS[kind], extra, kind)
        args = [ctx.string(a[f], f"{kind}.{f}", kind) for f in _ACTION_FIELDS[kind]]
        if kind == "create_node":
            actions.append(CreateNode(*args))
        elif kind == "delete_node":
            actions.append(DeleteNode(*args))
        elif kind == "deploy":
            binds = []
            for b in ctx.seq(a.get("bindings", []), "deploy.bindings", "bindings"):
                ctx.obj(b, "deploy binding", ("port", "provider"), (), "bindings")
                binds.append((b["port"], b["provider"]))
            actions.append(Deploy(*args, tuple(binds)))
        elif kind == "bind":
            actions.append(Bind(*args))
        elif kind == "unbind":
            actions.append(Unbind(*args))
        else:
            actions.append(Undeploy(*args))
    return DeploymentPlan(tuple(actions), data.get("source_hash"), data.get("target_hash"))


# -- scenarios -----------------------------------------------------------------

def scale_plans_to_dict(plans) -> list:
    return [{"name": p.name, "delta_capacity": p.delta_capacity, "added": dict(p.added),
             "new_nodes": dict(p.new_nodes), "target": p.target.to_dict()} for p in plans]


def scale_plans_from_dict(data, ctx: _Ctx) -> list:
    out = []
    for p in ctx.seq(data, "scale plans", "scale_plans"):
        ctx.obj(p, "scale plan", ("name", "delta_capacity"), ("added", "new_nodes", "target"), "name")
        target = config_from_dict(p["target"], ctx) if "target" in p else None
        try:
            out.append(ScalePlan(p["name"], ctx.number(p["delta_capacity"], "delta_capacity", "delta_capacity"),
                                 ctx.int_map(p.get("added", {}), "added", "added"),
                                 dict(p.get("new_nodes", {})), target))
        except ValueError as exc:
            ctx.fail(str(exc), p["name"])
    return out


SCENARIO_FIELDS = ("universe", "pipeline", "initial", "scale_plans", "workload", "sim")


def _part(value, base_dir, parse_dict, ctx):
    """Inline object, or a path (relative to the scenario file) to a JSON file."""
    if isinstance(value, str) and value != "builtin":
        path = os.path.join(base_dir, value)
        text = read_text(path)
        return parse_dict(_load(text, path), _Ctx(text, path))
    return parse_dict(value, ctx)


def parse_scenario(text: str, source: str = "<scenario>", base_dir: str = ".") -> dict:
    """Scenario parts as a dict with universe, pipeline, initial, scale_plans, workload, sim."""
    from .sim import SimConfig

    ctx = _Ctx(text, source)
    data = _load(text, source)
    ctx.obj(data, "scenario", ("universe", "pipeline", "initial"), ("scale_plans", "workload", "sim"))
    out = {
        "universe": _part(data["universe"], base_dir, universe_from_dict, ctx),
        "pipeline": _part(data["pipeline"], base_dir, pipeline_from_dict, ctx),
        "initial": _part(data["initial"], base_dir, config_from_dict, ctx),
        "scale_plans": _part(data["scale_plans"], base_dir, scale_plans_from_dict, ctx)
        if "scale_plans" in data else None,
    }
    if "workload" in data:
        out["workload"] = _part(data["workload"], base_dir, workload_from_dict, ctx)
    else:
        out["workload"] = None
    if "sim" in data:
        fields = SimConfig.__dataclass_fields__
        sim = ctx.obj(data["sim"], "sim", (), tuple(fields), "sim")
        try:
            out["sim"] = SimConfig(**sim)
        except (TypeError, ValueError) as exc:
            ctx.fail(f"sim: {exc}", "sim")
    else:
        out["sim"] = None
    return out


def parse_scale_plans(text: str, source: str = "<scale plans>") -> list:
    return scale_plans_from_dict(_load(text, source), _Ctx(text, source))


def workload_from_dict(data, ctx: _Ctx):
    from .sim import WorkloadProfile

    ctx.obj(data, "workload", ("points",), (), "workload")
    try:
        return WorkloadProfile(tuple(tuple(p) for p in ctx.seq(data["points"], "points", "points")))
    except (ValueError, TypeError) as exc:
        ctx.fail(f"workload: {exc}", "points")


def parse_workload(text: str, source: str = "<workload>"):
    return workload_from_dict(_load(text, source), _Ctx(text, source))


def workload_to_dict(w) -> dict:
    return {"points": [list(p) for p in w.points]}


def detect_kind(data) -> Optional[str]:
    """Best guess at what a parsed JSON document is."""
    if isinstance(data, list):
        if data and all(isinstance(x, dict) and "delta_capacity" in x for x in data):
            return "scale_plans"
        return "plan"
    if not isinstance(data, dict):
        return None
    keys = set(data)
    if "services" in keys:
        return "universe"
    if {"universe", "initial"} <= keys:
        return "scenario"
    if "actions" in keys:
        return "plan"
    if "stages" in keys:
        return "pipeline"
    if "nodes" in keys and "instances" in keys:
        return "configuration"
    if keys <= {"instances", "throughput"} and keys:
        return "request"
    if "points" in keys:
        return "workload"
    return None
