"""Deployment orchestration plans.

A plan is an ordered list of actions turning one configuration into another.
Instances are deployed together with their strong bindings (the providers
must already exist), weak bindings are added or dropped while instances are
live, and every prefix of a valid plan leaves node resources and port
capacities within limits.
"""

from __future__ import annotations

import enum
import heapq
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Union

from .model import (
    Binding,
    Configuration,
    Mode,
    Placement,
    UnknownType,
    Universe,
    check_correct,
    node_usage,
)


class StepErrorKind(str, enum.Enum):
    UNKNOWN_NODE = "UnknownNode"
    UNKNOWN_INSTANCE = "UnknownInstance"
    UNKNOWN_TYPE = "UnknownType"
    UNKNOWN_BINDING = "UnknownBinding"
    DUPLICATE_ID = "DuplicateId"
    DUPLICATE = "Duplicate"
    SELF_BINDING = "SelfBinding"
    PORT_MISMATCH = "PortMismatch"
    CAPACITY_EXCEEDED = "CapacityExceeded"
    RESOURCE_EXCEEDED = "ResourceExceeded"
    MISSING_STRONG_BINDING = "MissingStrongBinding"
    EXCESS_STRONG_BINDING = "ExcessStrongBinding"
    STRONG_DEPENDENCY_BROKEN = "StrongDependencyBroken"
    PROVIDER_IN_USE = "ProviderInUse"
    NODE_NOT_EMPTY = "NodeNotEmpty"


class PlanErrorKind(str, enum.Enum):
    STRONG_CYCLE = "StrongCycle"
    ENDPOINT_INCORRECT = "EndpointIncorrect"
    IDENTIFIER_REUSE = "IdentifierReuse"
    UNPLANNABLE = "Unplannable"
    HASH_MISMATCH = "HashMismatch"
    FINAL_INCORRECT = "FinalIncorrect"


class StepError(Exception):
    def __init__(self, kind: StepErrorKind, message: str):
        super().__init__(f"{kind.value}: {message}")
        self.kind = kind
        self.message = message


class PlanError(Exception):
    """A plan could not be built or replayed.

    ``kind`` is a :class:`PlanErrorKind` or, for a failing step, the
    :class:`StepErrorKind` of that step; ``step`` is the action index.
    """

    def __init__(self, kind, message: str, step: Optional[int] = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{kind.value}{where}: {message}")
        self.kind = kind
        self.step = step
        self.message = message


@dataclass(frozen=True)
class CreateNode:
    node: str
    node_type: str


@dataclass(frozen=True)
class DeleteNode:
    node: str


@dataclass(frozen=True)
class Deploy:
    instance: str
    type: str
    node: str
    bindings: tuple = ()     # ((port, provider), ...) covering the strong requirements

    def __post_init__(self):
        object.__setattr__(self, "bindings", tuple(sorted(tuple(b) for b in self.bindings)))


@dataclass(frozen=True)
class Bind:
    port: str
    requirer: str
    provider: str


@dataclass(frozen=True)
class Unbind:
    port: str
    requirer: str
    provider: str


@dataclass(frozen=True)
class Undeploy:
    instance: str


Action = Union[CreateNode, DeleteNode, Deploy, Bind, Unbind, Undeploy]


@dataclass(frozen=True)
class DeploymentPlan:
    actions: tuple = ()
    source_hash: Optional[str] = None
    target_hash: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    def __len__(self):
        return len(self.actions)


# -- single-step semantics -----------------------------------------------------

def _fan_in(config: Configuration, provider: str, port: str) -> int:
    return len({b.requirer for b in config.bindings if b.provider == provider and b.port == port})


def _check_capacity(universe, config, provider, port, extra=1):
    cap = universe.service(config.instances[provider].type).provided(port).capacity
    if cap is not None and _fan_in(config, provider, port) + extra > cap:
        raise StepError(StepErrorKind.CAPACITY_EXCEEDED,
                        f"provider {provider!r} port {port!r} is at capacity {cap}")


def _service(universe, name):
    try:
        return universe.service(name)
    except UnknownType as exc:
        raise StepError(StepErrorKind.UNKNOWN_TYPE, str(exc)) from None


def _need_instance(config, inst):
    if inst not in config.instances:
        raise StepError(StepErrorKind.UNKNOWN_INSTANCE, f"no instance {inst!r}")


def apply_action(config: Configuration, action: Action, universe: Universe) -> Configuration:
    """Apply one action; raises :class:`StepError` if it is not allowed."""
    if isinstance(action, CreateNode):
        if action.node in config.nodes:
            raise StepError(StepErrorKind.DUPLICATE_ID, f"node {action.node!r} exists")
        try:
            universe.node_type(action.node_type)
        except UnknownType as exc:
            raise StepError(StepErrorKind.UNKNOWN_TYPE, str(exc)) from None
        return config.evolve(nodes={**config.nodes, action.node: action.node_type})

    if isinstance(action, DeleteNode):
        if action.node not in config.nodes:
            raise StepError(StepErrorKind.UNKNOWN_NODE, f"no node {action.node!r}")
        hosted = config.instances_on(action.node)
        if hosted:
            raise StepError(StepErrorKind.NODE_NOT_EMPTY,
                            f"node {action.node!r} still hosts {hosted}")
        nodes = dict(config.nodes)
        del nodes[action.node]
        return config.evolve(nodes=nodes)

    if isinstance(action, Deploy):
        return _deploy(config, action, universe)

    if isinstance(action, Bind):
        b = Binding(action.port, action.requirer, action.provider)
        _need_instance(config, b.requirer)
        _need_instance(config, b.provider)
        if b.requirer == b.provider:
            raise StepError(StepErrorKind.SELF_BINDING, f"{b.requirer!r} cannot bind to itself")
        if _service(universe, config.instances[b.requirer].type).requirement(b.port) is None:
            raise StepError(StepErrorKind.PORT_MISMATCH, f"{b.requirer!r} does not require {b.port!r}")
        if _service(universe, config.instances[b.provider].type).provided(b.port) is None:
            raise StepError(StepErrorKind.PORT_MISMATCH, f"{b.provider!r} does not provide {b.port!r}")
        if b in config.bindings:
            raise StepError(StepErrorKind.DUPLICATE, f"binding {tuple(b)} already present")
        _check_capacity(universe, config, b.provider, b.port)
        return config.evolve(bindings=config.bindings + (b,))

    if isinstance(action, Unbind):
        b = Binding(action.port, action.requirer, action.provider)
        if b not in config.bindings:
            raise StepError(StepErrorKind.UNKNOWN_BINDING, f"binding {tuple(b)} not present")
        rest = tuple(x for x in config.bindings if x != b)
        req = _service(universe, config.instances[b.requirer].type).requirement(b.port)
        if req is not None and req.mode is Mode.STRONG:
            left = {x.provider for x in rest if x.requirer == b.requirer and x.port == b.port}
            if len(left) < req.arity:
                raise StepError(StepErrorKind.STRONG_DEPENDENCY_BROKEN,
                                f"unbinding {tuple(b)} leaves {b.requirer!r} below strong arity")
        return config.evolve(bindings=rest)

    if isinstance(action, Undeploy):
        inst = action.instance
        _need_instance(config, inst)
        for b in config.bindings:
            if b.provider != inst:
                continue
            req = _service(universe, config.instances[b.requirer].type).requirement(b.port)
            if req is not None and req.mode is Mode.STRONG:
                raise StepError(StepErrorKind.STRONG_DEPENDENCY_BROKEN,
                                f"{b.requirer!r} still depends strongly on {inst!r} via {b.port!r}")
            raise StepError(StepErrorKind.PROVIDER_IN_USE,
                            f"{b.requirer!r} is still bound to {inst!r} via {b.port!r}")
        instances = dict(config.instances)
        del instances[inst]
        return config.evolve(instances=instances,
                             bindings=tuple(b for b in config.bindings if b.requirer != inst))

    raise TypeError(f"not an action: {action!r}")


def _deploy(config, action, universe):
    if action.instance in config.instances:
        raise StepError(StepErrorKind.DUPLICATE_ID, f"instance {action.instance!r} exists")
    svc = _service(universe, action.type)
    if action.node not in config.nodes:
        raise StepError(StepErrorKind.UNKNOWN_NODE, f"no node {action.node!r}")
    seen = set()
    per_port = defaultdict(set)
    for port, provider in action.bindings:
        if (port, provider) in seen:
            raise StepError(StepErrorKind.DUPLICATE, f"binding ({port!r}, {provider!r}) repeated")
        seen.add((port, provider))
        req = svc.requirement(port)
        if req is None or req.mode is not Mode.STRONG:
            raise StepError(StepErrorKind.PORT_MISMATCH,
                            f"{action.type!r} has no strong requirement on {port!r}")
        _need_instance(config, provider)
        if _service(universe, config.instances[provider].type).provided(port) is None:
            raise StepError(StepErrorKind.PORT_MISMATCH, f"{provider!r} does not provide {port!r}")
        _check_capacity(universe, config, provider, port)
        per_port[port].add(provider)
    for req in svc.strong_requirements:
        have = len(per_port.get(req.port, ()))
        if have < req.arity:
            raise StepError(StepErrorKind.MISSING_STRONG_BINDING,
                            f"{action.instance!r} needs {req.arity} providers on {req.port!r}, got {have}")
        if have > req.arity:
            raise StepError(StepErrorKind.EXCESS_STRONG_BINDING,
                            f"{action.instance!r} deploys with {have} providers on {req.port!r}, arity {req.arity}")
    used = node_usage(universe, config)[action.node]
    cap = universe.node_type(config.nodes[action.node]).capacity
    for res, amount in svc.consumption.items():
        if used.get(res, 0) + amount > cap.get(res, 0):
            raise StepError(StepErrorKind.RESOURCE_EXCEEDED,
                            f"node {action.node!r} lacks {res} for {action.instance!r}")
    instances = {**config.instances, action.instance: Placement(action.type, action.node)}
    new = tuple(Binding(p, action.instance, prov) for p, prov in action.bindings)
    return config.evolve(instances=instances, bindings=config.bindings + new)


# -- replay --------------------------------------------------------------------

def validate_plan(source: Configuration, plan: DeploymentPlan, universe: Universe) -> Configuration:
    """Replay ``plan`` from ``source`` and return the final configuration.

    Intermediate states may leave weak requirements unsatisfied; the final
    state must pass the full correctness check.
    """
    if not check_correct(universe, source).ok:
        raise PlanError(PlanErrorKind.ENDPOINT_INCORRECT, "source configuration is not correct")
    if plan.source_hash is not None and plan.source_hash != source.digest():
        raise PlanError(PlanErrorKind.HASH_MISMATCH, "plan was built for a different source")
    config = source
    for i, action in enumerate(plan.actions):
        try:
            config = apply_action(config, action, universe)
        except StepError as exc:
            raise PlanError(exc.kind, exc.message, step=i) from None
    report = check_correct(universe, config)
    if not report.ok:
        raise PlanError(PlanErrorKind.FINAL_INCORRECT, report.violations[0].message,
                        step=len(plan.actions))
    if plan.target_hash is not None and plan.target_hash != config.digest():
        raise PlanError(PlanErrorKind.HASH_MISMATCH, "replay does not reach the planned target")
    return config


# -- synthesis -----------------------------------------------------------------

def _strong_ports(universe, type_name):
    return {r.port: r.arity for r in universe.service(type_name).strong_requirements}


def _deploy_order(new, deps):
    """Kahn's algorithm with lexicographic tie-breaking; None on a cycle."""
    indeg = {i: 0 for i in new}
    users = defaultdict(list)
    for i in new:
        for d in deps[i]:
            indeg[i] += 1
            users[d].append(i)
    ready = [i for i in new if indeg[i] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        i = heapq.heappop(ready)
        out.append(i)
        for u in users[i]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    return out if len(out) == len(new) else None


def synthesize_plan(source: Configuration, target: Configuration, universe: Universe) -> DeploymentPlan:
    """Build a plan from ``source`` to ``target``.

    Raises :class:`PlanError` with ``StrongCycle`` when new instances (or
    removed ones) depend strongly on each other in a cycle, since no order
    can then deploy (or remove) them one at a time.

    Actions are scheduled by priority: node creations, deployments in
    strong-dependency order (ties by instance id), binds, unbinds, undeploys
    and node deletions.  At every step the highest-priority action that is
    currently allowed is taken, so removals are only pulled forward when an
    addition is blocked on resources or port capacity.
    """
    for label, cfg in (("source", source), ("target", target)):
        report = check_correct(universe, cfg)
        if not report.ok:
            raise PlanError(PlanErrorKind.ENDPOINT_INCORRECT,
                            f"{label} configuration is not correct: {report.violations[0].message}")
    for n in set(source.nodes) & set(target.nodes):
        if source.nodes[n] != target.nodes[n]:
            raise PlanError(PlanErrorKind.IDENTIFIER_REUSE, f"node {n!r} changes type")
    for i in set(source.instances) & set(target.instances):
        if source.instances[i] != target.instances[i]:
            raise PlanError(PlanErrorKind.IDENTIFIER_REUSE, f"instance {i!r} changes type or node")

    new_nodes = sorted(set(target.nodes) - set(source.nodes))
    gone_nodes = sorted(set(source.nodes) - set(target.nodes))
    new_insts = sorted(set(target.instances) - set(source.instances))
    gone_insts = sorted(set(source.instances) - set(target.instances))
    src_b, tgt_b = set(source.bindings), set(target.bindings)
    new_set = set(new_insts)

    # strong bindings travel with Deploy; surviving providers are preferred
    initial, deps = {}, {}
    for i in new_insts:
        chosen = []
        for port, arity in sorted(_strong_ports(universe, target.instances[i].type).items()):
            provs = sorted({b.provider for b in tgt_b if b.requirer == i and b.port == port},
                           key=lambda p: (p in new_set, p))
            chosen.extend((port, p) for p in provs[:arity])
        initial[i] = tuple(chosen)
        deps[i] = sorted({p for _, p in chosen if p in new_set})
    order = _deploy_order(new_insts, deps)
    if order is None:
        cyc = sorted(i for i in new_insts if deps[i])
        raise PlanError(PlanErrorKind.STRONG_CYCLE, f"strong dependency cycle among new instances {cyc}")
    deployed_with = {Binding(port, i, p) for i in new_insts for port, p in initial[i]}
    gone_set = set(gone_insts)
    # a departing provider waits for its departing strong requirers
    waits = {i: set() for i in gone_insts}
    for b in src_b:
        if b.requirer in gone_set and b.provider in gone_set:
            req = universe.service(source.instances[b.requirer].type).requirement(b.port)
            if req.mode is Mode.STRONG:
                waits[b.provider].add(b.requirer)
    if _deploy_order(gone_insts, {i: sorted(w) for i, w in waits.items()}) is None:
        cyc = sorted(i for i in gone_insts if waits[i])
        raise PlanError(PlanErrorKind.STRONG_CYCLE, f"strong dependency cycle among removed instances {cyc}")

    pending = []
    pending += [CreateNode(n, target.nodes[n]) for n in new_nodes]
    pending += [Deploy(i, target.instances[i].type, target.instances[i].node, initial[i]) for i in order]
    pending += [Bind(*b) for b in sorted(tgt_b - src_b - deployed_with)]
    # bindings of departing requirers leave with them unless they are weak
    for b in sorted(src_b - tgt_b):
        req = universe.service(source.instances[b.requirer].type).requirement(b.port)
        if b.requirer in gone_set and req.mode is Mode.STRONG:
            continue
        pending.append(Unbind(*b))
    pending += [Undeploy(i) for i in gone_insts]
    pending += [DeleteNode(n) for n in gone_nodes]

    actions = []
    config = source
    while pending:
        for k, action in enumerate(pending):
            try:
                config = apply_action(config, action, universe)
            except StepError:
                continue
            actions.append(action)
            del pending[k]
            break
        else:
            try:
                apply_action(config, pending[0], universe)
            except StepError as exc:
                raise PlanError(PlanErrorKind.UNPLANNABLE,
                                f"no applicable action; first pending {pending[0]} fails: {exc}") from None
    if config != target:
        raise PlanError(PlanErrorKind.UNPLANNABLE, "scheduled actions do not reach the target")
    return DeploymentPlan(tuple(actions), source.digest(), target.digest())


# -- serialisation -------------------------------------------------------------

def action_to_dict(action: Action) -> dict:
    if isinstance(action, CreateNode):
        return {"action": "create_node", "node": action.node, "node_type": action.node_type}
    if isinstance(action, DeleteNode):
        return {"action": "delete_node", "node": action.node}
    if isinstance(action, Deploy):
        return {"action": "deploy", "instance": action.instance, "type": action.type,
                "node": action.node,
                "bindings": [{"port": p, "provider": q} for p, q in action.bindings]}
    if isinstance(action, Bind):
        return {"action": "bind", "port": action.port, "requirer": action.requirer,
                "provider": action.provider}
    if isinstance(action, Unbind):
        return {"action": "unbind", "port": action.port, "requirer": action.requirer,
                "provider": action.provider}
    if isinstance(action, Undeploy):
        return {"action": "undeploy", "instance": action.instance}
    raise TypeError(f"not an action: {action!r}")
