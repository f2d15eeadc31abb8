"""Domain types for microservice architectures.

A :class:`Universe` is the component repository: resource kinds, service
types and node types.  A :class:`Configuration` is a snapshot of provisioned
nodes, placed instances and port bindings.  :func:`check_correct` is the
correctness predicate every other module relies on.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Optional

# Sentinel for a provided port with no fan-in limit.
UNBOUNDED = None


class ModelError(Exception):
    """Base class for model errors."""


class UnknownType(ModelError):
    """A configuration references a service or node type the universe lacks."""


class Mode(str, enum.Enum):
    STRONG = "strong"
    WEAK = "weak"


def _frozen_map(data: Optional[Mapping]) -> Mapping:
    return MappingProxyType(dict(data or {}))


@dataclass(frozen=True)
class ResourceKind:
    name: str
    unit: str = ""


@dataclass(frozen=True)
class ProvidedPort:
    port: str
    capacity: Optional[int] = UNBOUNDED

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 0:
            raise ValueError(f"port {self.port!r}: capacity must be >= 0")

    @property
    def bounded(self) -> bool:
        return self.capacity is not None


@dataclass(frozen=True)
class Requirement:
    port: str
    arity: int = 1
    mode: Mode = Mode.STRONG

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.arity < 0:
            raise ValueError(f"requirement on {self.port!r}: arity must be >= 0")
        if self.mode is Mode.STRONG and self.arity < 1:
            raise ValueError(f"strong requirement on {self.port!r} needs arity >= 1")


@dataclass(frozen=True)
class MicroserviceType:
    name: str
    provides: tuple = ()
    requires: tuple = ()
    consumption: Mapping[str, int] = field(default_factory=dict)
    max_load: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "provides", tuple(self.provides))
        object.__setattr__(self, "requires", tuple(self.requires))
        object.__setattr__(self, "consumption", _frozen_map(self.consumption))
        if any(v < 0 for v in self.consumption.values()):
            raise ValueError(f"service {self.name!r}: negative consumption")
        if self.max_load < 0:
            raise ValueError(f"service {self.name!r}: negative max_load")

    def provided(self, port: str) -> Optional[ProvidedPort]:
        for p in self.provides:
            if p.port == port:
                return p
        return None

    def requirement(self, port: str) -> Optional[Requirement]:
        for r in self.requires:
            if r.port == port:
                return r
        return None

    @property
    def strong_requirements(self) -> tuple:
        return tuple(r for r in self.requires if r.mode is Mode.STRONG)


@dataclass(frozen=True)
class NodeType:
    name: str
    cost: float
    capacity: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "capacity", _frozen_map(self.capacity))
        if self.cost < 0:
            raise ValueError(f"node type {self.name!r}: negative cost")
        if any(v < 0 for v in self.capacity.values()):
            raise ValueError(f"node type {self.name!r}: negative capacity")


@dataclass(frozen=True)
class Universe:
    resources: tuple = ()
    service_types: tuple = ()
    node_types: tuple = ()

    def __post_init__(self):
        for name in ("resources", "service_types", "node_types"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        services, nodes = {}, {}
        for s in self.service_types:
            services.setdefault(s.name, s)
        for n in self.node_types:
            nodes.setdefault(n.name, n)
        object.__setattr__(self, "_services", services)
        object.__setattr__(self, "_nodes", nodes)

    @property
    def resource_names(self) -> tuple:
        return tuple(r.name for r in self.resources)

    def service(self, name: str) -> MicroserviceType:
        try:
            return self._services[name]
        except KeyError:
            raise UnknownType(f"unknown service type {name!r}") from None

    def node_type(self, name: str) -> NodeType:
        try:
            return self._nodes[name]
        except KeyError:
            raise UnknownType(f"unknown node type {name!r}") from None

    def has_service(self, name: str) -> bool:
        return name in self._services

    def providers_of(self, port: str) -> list:
        """Service types providing ``port``, in declaration order."""
        return [s for s in self.service_types if s.provided(port) is not None]

    def replace(self, **changes) -> "Universe":
        data = dict(resources=self.resources, service_types=self.service_types,
                    node_types=self.node_types)
        data.update(changes)
        return Universe(**data)


class Placement(NamedTuple):
    type: str
    node: str


class Binding(NamedTuple):
    port: str
    requirer: str
    provider: str


@dataclass(frozen=True)
class Configuration:
    """Nodes (id -> node type), instances (id -> placement) and bindings.

    Bindings are kept as a sorted tuple so duplicates stay visible to
    :func:`check_correct` while equality stays order-independent.
    """

    nodes: Mapping[str, str] = field(default_factory=dict)
    instances: Mapping[str, Placement] = field(default_factory=dict)
    bindings: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen_map(self.nodes))
        object.__setattr__(
            self, "instances",
            _frozen_map({k: Placement(*v) for k, v in dict(self.instances).items()}))
        object.__setattr__(self, "bindings", tuple(sorted(Binding(*b) for b in self.bindings)))

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return (dict(self.nodes) == dict(other.nodes)
                and dict(self.instances) == dict(other.instances)
                and self.bindings == other.bindings)

    __hash__ = None

    def counts(self) -> Counter:
        """Number of live instances per service type."""
        return Counter(p.type for p in self.instances.values())

    def instances_of(self, type_name: str) -> list:
        return sorted(i for i, p in self.instances.items() if p.type == type_name)

    def instances_on(self, node_id: str) -> list:
        return sorted(i for i, p in self.instances.items() if p.node == node_id)

    def evolve(self, nodes=None, instances=None, bindings=None) -> "Configuration":
        return Configuration(
            nodes=self.nodes if nodes is None else nodes,
            instances=self.instances if instances is None else instances,
            bindings=self.bindings if bindings is None else bindings,
        )

    def to_dict(self) -> dict:
        return {
            "nodes": dict(sorted(self.nodes.items())),
            "instances": {
                i: {"type": p.type, "node": p.node} for i, p in sorted(self.instances.items())
            },
            "bindings": [
                {"port": b.port, "requirer": b.requirer, "provider": b.provider}
                for b in self.bindings
            ],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class ViolationKind(str, enum.Enum):
    UNSATISFIED_REQUIREMENT = "UnsatisfiedRequirement"
    CAPACITY_EXCEEDED = "CapacityExceeded"
    RESOURCE_EXCEEDED = "ResourceExceeded"
    DANGLING_REFERENCE = "DanglingReference"
    SELF_BINDING = "SelfBinding"
    DUPLICATE = "Duplicate"


class Violation(NamedTuple):
    kind: ViolationKind
    message: str


@dataclass
class CorrectnessReport:
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v.kind for v in self.violations}

    def __bool__(self):
        return self.ok


def _resolve_types(universe: Universe, config: Configuration) -> None:
    for node_id, nt in config.nodes.items():
        universe.node_type(nt)
    for inst, p in config.instances.items():
        universe.service(p.type)


def node_usage(universe: Universe, config: Configuration) -> dict:
    """Per node, the summed consumption of its hosted instances."""
    usage = {n: Counter() for n in config.nodes}
    for p in config.instances.values():
        if p.node in usage:
            usage[p.node].update(universe.service(p.type).consumption)
    return usage


def check_correct(universe: Universe, config: Configuration,
                  require_weak: bool = True) -> CorrectnessReport:
    """List every correctness violation of ``config``.

    With ``require_weak=False`` the weak arities are not enforced; plan replay
    uses that for intermediate states.
    """
    _resolve_types(universe, config)
    out = []

    def add(kind, msg):
        out.append(Violation(kind, msg))

    for inst, p in sorted(config.instances.items()):
        if p.node not in config.nodes:
            add(ViolationKind.DANGLING_REFERENCE, f"instance {inst!r} placed on unknown node {p.node!r}")

    seen = Counter(config.bindings)
    for b, n in sorted(seen.items()):
        if n > 1:
            add(ViolationKind.DUPLICATE, f"binding {tuple(b)} appears {n} times")

    bound = defaultdict(set)       # (requirer, port) -> providers
    fan_in = defaultdict(set)      # (provider, port) -> requirers
    for b in seen:
        if b.requirer == b.provider:
            add(ViolationKind.SELF_BINDING, f"instance {b.requirer!r} bound to itself on {b.port!r}")
            continue
        req = config.instances.get(b.requirer)
        prov = config.instances.get(b.provider)
        if req is None or prov is None:
            missing = b.requirer if req is None else b.provider
            add(ViolationKind.DANGLING_REFERENCE, f"binding {tuple(b)} names unknown instance {missing!r}")
            continue
        if universe.service(req.type).requirement(b.port) is None:
            add(ViolationKind.DANGLING_REFERENCE,
                f"binding {tuple(b)}: {req.type!r} does not require port {b.port!r}")
            continue
        if universe.service(prov.type).provided(b.port) is None:
            add(ViolationKind.DANGLING_REFERENCE,
                f"binding {tuple(b)}: {prov.type!r} does not provide port {b.port!r}")
            continue
        bound[b.requirer, b.port].add(b.provider)
        fan_in[b.provider, b.port].add(b.requirer)

    for inst, p in sorted(config.instances.items()):
        for r in universe.service(p.type).requires:
            if r.mode is Mode.WEAK and not require_weak:
                continue
            have = len(bound.get((inst, r.port), ()))
            if have < r.arity:
                add(ViolationKind.UNSATISFIED_REQUIREMENT,
                    f"instance {inst!r} has {have}/{r.arity} providers on {r.port!r}")

    for (prov, port), reqs in sorted(fan_in.items()):
        cap = universe.service(config.instances[prov].type).provided(port).capacity
        if cap is not None and len(reqs) > cap:
            add(ViolationKind.CAPACITY_EXCEEDED,
                f"provider {prov!r} port {port!r} has {len(reqs)} requirers, capacity {cap}")

    for node_id, used in sorted(node_usage(universe, config).items()):
        cap = universe.node_type(config.nodes[node_id]).capacity
        for res, amount in sorted(used.items()):
            if amount > cap.get(res, 0):
                add(ViolationKind.RESOURCE_EXCEEDED,
                    f"node {node_id!r} uses {amount} {res}, capacity {cap.get(res, 0)}")

    return CorrectnessReport(out)


def total_cost(config: Configuration, universe: Universe) -> float:
    """Sum of node type costs over all provisioned nodes, empty ones included."""
    return sum(universe.node_type(nt).cost for nt in config.nodes.values())


class IssueKind(str, enum.Enum):
    DUPLICATE_NAME = "DuplicateName"
    UNPROVIDABLE_PORT = "UnprovidablePort"
    UNDEPLOYABLE_TYPE = "UndeployableType"
    ZERO_MAX_LOAD = "ZeroMaxLoad"
    UNKNOWN_RESOURCE = "UnknownResource"
    MISSING_CAPACITY = "MissingCapacity"
    DUPLICATE_PORT = "DuplicatePort"
    SELF_LOOP = "SelfLoop"


class Issue(NamedTuple):
    severity: str  # "error" | "warning"
    kind: IssueKind
    message: str


@dataclass
class ValidationReport:
    issues: list

    @property
    def errors(self) -> list:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def warnings(self) -> list:
        return [i for i in self.issues if i.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors

    def kinds(self) -> set:
        return {i.kind for i in self.issues}


def _duplicates(names: Iterable[str]) -> list:
    return sorted(n for n, c in Counter(names).items() if c > 1)


def validate_universe(universe: Universe) -> ValidationReport:
    issues = []

    def err(kind, msg):
        issues.append(Issue("error", kind, msg))

    for label, names in (
        ("resource", [r.name for r in universe.resources]),
        ("service type", [s.name for s in universe.service_types]),
        ("node type", [n.name for n in universe.node_types]),
    ):
        for dup in _duplicates(names):
            err(IssueKind.DUPLICATE_NAME, f"duplicate {label} name {dup!r}")

    resources = set(universe.resource_names)
    provided = {p.port for s in universe.service_types for p in s.provides}

    for n in universe.node_types:
        for res in sorted(set(n.capacity) - resources):
            err(IssueKind.UNKNOWN_RESOURCE, f"node type {n.name!r} declares unknown resource {res!r}")
        for res in sorted(resources - set(n.capacity)):
            err(IssueKind.MISSING_CAPACITY, f"node type {n.name!r} lacks capacity for {res!r}")

    for s in universe.service_types:
        for dup in _duplicates(p.port for p in s.provides):
            err(IssueKind.DUPLICATE_PORT, f"{s.name!r} provides {dup!r} twice")
        for dup in _duplicates(r.port for r in s.requires):
            err(IssueKind.DUPLICATE_PORT, f"{s.name!r} requires {dup!r} twice")
        own = {p.port for p in s.provides}
        for r in s.requires:
            if r.port in own:
                err(IssueKind.SELF_LOOP, f"{s.name!r} requires its own port {r.port!r}")
            elif r.port not in provided:
                issues.append(Issue("warning", IssueKind.UNPROVIDABLE_PORT,
                                    f"{s.name!r} requires {r.port!r} which no type provides"))
        for res in sorted(set(s.consumption) - resources):
            err(IssueKind.UNKNOWN_RESOURCE, f"{s.name!r} consumes unknown resource {res!r}")
        if s.max_load <= 0:
            err(IssueKind.ZERO_MAX_LOAD, f"{s.name!r} has max_load {s.max_load}")
        if not any(fits(s.consumption, n.capacity) for n in universe.node_types):
            err(IssueKind.UNDEPLOYABLE_TYPE, f"{s.name!r} fits on no node type")

    return ValidationReport(issues)


def fits(demand: Mapping[str, int], capacity: Mapping[str, int]) -> bool:
    return all(amount <= capacity.get(res, 0) for res, amount in demand.items())
