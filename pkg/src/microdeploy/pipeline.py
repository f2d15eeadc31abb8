"""The built-in email-processing case study and its throughput model.

Every stage is one analysis service fronted by its own load-balancer type.
A message enters at the receiver and fans out along routing edges; each edge
is an independent fork taken with its probability, so the expected number of
visits a stage receives per inbound message is the probability-weighted sum
over its incoming edges.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional

from .model import (
    Configuration,
    MicroserviceType,
    ModelError,
    Mode,
    NodeType,
    ProvidedPort,
    Requirement,
    ResourceKind,
    Universe,
)
from .synthesis import Status, TargetRequest, ThroughputTarget, synthesize


class MissingStage(ModelError):
    pass


class PipelineError(ModelError):
    pass


class Infeasible(Exception):
    pass


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass(frozen=True)
class Stage:
    name: str
    service: str
    balancer: str


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple
    routes: tuple          # ((source stage, target stage, probability), ...)
    entry: str

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "routes", tuple(tuple(r) for r in self.routes))
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise PipelineError("duplicate stage names")
        if self.entry not in names:
            raise PipelineError(f"entry stage {self.entry!r} is not a stage")
        seen = set()
        for src, dst, p in self.routes:
            if src not in names or dst not in names:
                raise PipelineError(f"route {src!r} -> {dst!r} names an unknown stage")
            if (src, dst) in seen:
                raise PipelineError(f"route {src!r} -> {dst!r} given twice")
            seen.add((src, dst))
            if not 0 <= _frac(p) <= 1:
                raise PipelineError(f"route {src!r} -> {dst!r}: probability {p} outside [0, 1]")
        if self.topological_order() is None:
            raise PipelineError("routing graph has a cycle")

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise PipelineError(f"no stage {name!r}")

    def successors(self, name: str) -> list:
        return [(dst, p) for src, dst, p in self.routes if src == name]

    def topological_order(self) -> Optional[list]:
        indeg = {s.name: 0 for s in self.stages}
        for _, dst, _ in self.routes:
            indeg[dst] += 1
        order = []
        ready = [s.name for s in self.stages if indeg[s.name] == 0]
        while ready:
            n = ready.pop(0)
            order.append(n)
            for dst, _ in self.successors(n):
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    ready.append(dst)
        return order if len(order) == len(self.stages) else None

    def visits(self) -> dict:
        """Expected visits per inbound message, as exact fractions."""
        v = {s.name: Fraction(0) for s in self.stages}
        v[self.entry] = Fraction(1)
        for n in self.topological_order():
            for dst, p in self.successors(n):
                v[dst] += v[n] * _frac(p)
        return v

    def types(self) -> list:
        return [t for s in self.stages for t in (s.service, s.balancer)]

    def required_counts(self, rate, universe: Universe) -> dict:
        """Instances of each stage type needed to sustain ``rate`` msg/s."""
        rate = _frac(rate)
        visits = self.visits()
        out = {}
        for s in self.stages:
            v = visits[s.name]
            for t in (s.service, s.balancer):
                load = _frac(universe.service(t).max_load)
                if load <= 0:
                    raise PipelineError(f"type {t!r} has no capacity")
                out[t] = max(1, math.ceil(rate * v / load)) if v > 0 else 1
        return out

    def to_dict(self) -> dict:
        return {
            "entry": self.entry,
            "stages": [{"name": s.name, "service": s.service, "balancer": s.balancer}
                       for s in self.stages],
            "routes": [{"from": a, "to": b, "probability": p} for a, b, p in self.routes],
        }


def stage_capacity(config: Configuration, spec: PipelineSpec, universe: Universe) -> dict:
    """Per-stage inbound rate the stage can absorb, in msg/s of pipeline input."""
    counts = config.counts()
    visits = spec.visits()
    out = {}
    for s in spec.stages:
        v = visits[s.name]
        caps = []
        for t in (s.service, s.balancer):
            n = counts.get(t, 0)
            if n == 0:
                raise MissingStage(f"stage {s.name!r} has no {t!r} instance")
            if v > 0:
                caps.append(n * _frac(universe.service(t).max_load) / v)
        out[s.name] = min(caps) if caps else math.inf
    return out


def supported_inbound(config: Configuration, spec: PipelineSpec, universe: Universe) -> float:
    """Largest sustained inbound rate the configuration handles, in msg/s."""
    caps = [c for c in stage_capacity(config, spec, universe).values() if c != math.inf]
    return float(min(caps)) if caps else math.inf


# -- built-in case study -------------------------------------------------------

# name -> max_load in msg/s
DEFAULT_MAX_LOADS = {
    "MessageReceiver": 40_000,
    "MessageParser": 10_000,
    "HeaderAnalyser": 40_000,
    "MessageAnalyser": 30_000,
    "LinkAnalyser": 30_000,
    "TextAnalyser": 30_000,
    "SentimentAnalyser": 30_000,
    "AttachmentsManager": 30_000,
    "VirusScanner": 30_000,
    "ImageAnalyser": 30_000,
    "NSFWDetector": 30_000,
    "ImageRecognizer": 30_000,
}
BALANCER_MAX_LOAD = 70_000

# the four sub-pipelines hang off the parser
DEFAULT_ROUTES = (
    ("MessageReceiver", "MessageParser", 1.0),
    ("MessageParser", "HeaderAnalyser", 1.0),
    ("HeaderAnalyser", "MessageAnalyser", 1.0),
    ("MessageParser", "LinkAnalyser", 0.6),
    ("MessageParser", "TextAnalyser", 1.0),
    ("TextAnalyser", "SentimentAnalyser", 1.0),
    ("MessageParser", "AttachmentsManager", 0.4),
    ("AttachmentsManager", "VirusScanner", 1.0),
    ("VirusScanner", "ImageAnalyser", 1.0),
    ("ImageAnalyser", "NSFWDetector", 1.0),
    ("ImageAnalyser", "ImageRecognizer", 1.0),
)

IMAGE_STAGES = {"ImageAnalyser", "NSFWDetector", "ImageRecognizer"}

DEFAULT_NODE_TYPES = (
    NodeType("small", 100, {"cpu": 2, "mem": 4096}),
    NodeType("medium", 195, {"cpu": 4, "mem": 8192}),
    NodeType("large", 380, {"cpu": 8, "mem": 16384}),
)

BASE_THROUGHPUT = 10_000


def balancer_name(stage: str) -> str:
    return f"{stage}LB"


def frontend_port(stage: str) -> str:
    return f"in:{stage}"


def backend_port(stage: str) -> str:
    return f"backend:{stage}"


def email_universe(max_loads: Optional[Mapping[str, float]] = None,
                   balancer_load: float = BALANCER_MAX_LOAD,
                   node_types=DEFAULT_NODE_TYPES) -> Universe:
    loads = dict(DEFAULT_MAX_LOADS)
    loads.update(max_loads or {})
    services = []
    for stage, load in loads.items():
        # a service needs a frontend of every successor at deploy time and
        # joins its own balancer's backend pool once live
        requires = [Requirement(frontend_port(dst), 1, Mode.STRONG)
                    for src, dst, _ in DEFAULT_ROUTES if src == stage]
        requires.append(Requirement(backend_port(stage), 1, Mode.WEAK))
        mem = 2048 if stage in IMAGE_STAGES else 1024
        services.append(MicroserviceType(stage, (), tuple(requires), {"cpu": 1, "mem": mem}, load))
    for stage in loads:
        services.append(MicroserviceType(
            balancer_name(stage),
            (ProvidedPort(frontend_port(stage)), ProvidedPort(backend_port(stage))),
            (),
            {"cpu": 1, "mem": 512},
            balancer_load,
        ))
    return Universe((ResourceKind("cpu", "cores"), ResourceKind("mem", "MB")),
                    tuple(services), tuple(node_types))


def email_pipeline() -> PipelineSpec:
    stages = tuple(Stage(n, n, balancer_name(n)) for n in DEFAULT_MAX_LOADS)
    return PipelineSpec(stages, DEFAULT_ROUTES, "MessageReceiver")


def _synthesize_or_raise(universe, spec, rate, existing=None, time_budget=60.0):
    sol = synthesize(universe, TargetRequest({}, ThroughputTarget(rate, spec)),
                     existing=existing, time_budget=time_budget)
    if sol.configuration is None:
        raise Infeasible(f"no configuration supports {rate} msg/s ({sol.status.value})")
    return sol.configuration


@functools.lru_cache(maxsize=None)
def builtin_email_pipeline():
    """(universe, pipeline, base configuration) of the case study."""
    universe = email_universe()
    spec = email_pipeline()
    base = _synthesize_or_raise(universe, spec, BASE_THROUGHPUT)
    return universe, spec, base


# -- scale plans ---------------------------------------------------------------

@dataclass(frozen=True)
class ScalePlan:
    name: str
    delta_capacity: float
    added: Mapping[str, int] = field(default_factory=dict)      # type -> new instances
    new_nodes: Mapping[str, str] = field(default_factory=dict)  # node id -> node type
    target: Optional[Configuration] = None

    def __post_init__(self):
        if self.delta_capacity <= 0:
            raise ValueError(f"{self.name}: delta must be positive")

    @property
    def added_instances(self) -> int:
        return sum(self.added.values())


SCALE_DELTAS = (("Scale 1", 20_000), ("Scale 2", 50_000), ("Scale 3", 80_000))


def scale_plan(name: str, delta, universe: Universe, spec: PipelineSpec,
               base: Configuration, time_budget: float = 60.0) -> ScalePlan:
    """Cheapest extension of ``base`` supporting its current rate plus ``delta``."""
    rate = supported_inbound(base, spec, universe) + delta
    target = _synthesize_or_raise(universe, spec, rate, existing=base, time_budget=time_budget)
    before, after = base.counts(), target.counts()
    added = {t: after[t] - before.get(t, 0) for t in sorted(after) if after[t] > before.get(t, 0)}
    new_nodes = {n: k for n, k in sorted(target.nodes.items()) if n not in base.nodes}
    return ScalePlan(name, delta, added, new_nodes, target)


def builtin_scale_plans(universe: Universe, spec: PipelineSpec, base: Configuration,
                        time_budget: float = 60.0) -> list:
    return [scale_plan(n, d, universe, spec, base, time_budget) for n, d in SCALE_DELTAS]


def greedy_select(current_supported, target, plans) -> list:
    """Repeatedly take the plan whose result lands closest to ``target``."""
    if not plans:
        raise ValueError("no scale plans to choose from")
    if any(p.delta_capacity <= 0 for p in plans):
        raise ValueError("scale plan deltas must be positive")
    supported = current_supported
    out = []
    while supported < target:
        best = min(plans, key=lambda p: (abs(target - (supported + p.delta_capacity)), p.delta_capacity))
        out.append(best)
        supported += best.delta_capacity
    return out
