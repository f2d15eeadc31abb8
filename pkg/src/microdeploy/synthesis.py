"""Optimal deployment synthesis.

Given a universe, a target request and a per-node-type budget, find a correct
configuration of minimum total node cost (ties broken by fewer instances).
The search is a branch-and-bound over per-type instance counts; every leaf is
priced by an exact minimum-cost packing of the instances onto nodes.  An
optional existing configuration is kept intact and extended, which is how
run-time reconfigurations are computed.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional

from .model import (
    Binding,
    Configuration,
    ModelError,
    Placement,
    Universe,
    check_correct,
    fits,
    node_usage,
    total_cost,
)
from .packing import BinSpec, PackResult, SearchTimeout, min_cost_packing

DEFAULT_NODE_BUDGET = 300


class UnprovidablePort(ModelError):
    pass


class InternalError(RuntimeError):
    """Aggregate counts could not be realised; indicates an encoding bug."""


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    TIMED_OUT = "TimedOut"


@dataclass(frozen=True)
class ThroughputTarget:
    """A sustained inbound rate the deployment must support for a pipeline.

    ``pipeline`` is anything with ``required_counts(rate, universe)``; in
    practice a :class:`microdeploy.pipeline.PipelineSpec`.
    """

    value: float
    pipeline: object


@dataclass(frozen=True)
class TargetRequest:
    required_instances: Mapping[str, int] = field(default_factory=dict)
    required_throughput: Optional[ThroughputTarget] = None

    def __post_init__(self):
        object.__setattr__(self, "required_instances", dict(self.required_instances))
        if any(c < 0 for c in self.required_instances.values()):
            raise ValueError("required instance counts must be >= 0")
        if not self.required_instances and self.required_throughput is None:
            raise ValueError("a request needs instance counts or a throughput target")

    def minimum_counts(self, universe: Universe) -> dict:
        out = {t: c for t, c in self.required_instances.items() if c > 0}
        if self.required_throughput is not None:
            tp = self.required_throughput
            for t, c in tp.pipeline.required_counts(tp.value, universe).items():
                out[t] = max(out.get(t, 0), c)
        for t in out:
            universe.service(t)
        return out


# -- constraint system ---------------------------------------------------------

@dataclass(frozen=True)
class LinearConstraint:
    coeffs: tuple          # ((var, coefficient), ...)
    op: str                # ">=", "<=", "=="
    rhs: Fraction
    label: str

    def holds(self, values: Mapping[str, int]) -> bool:
        lhs = sum(Fraction(c) * values.get(v, 0) for v, c in self.coeffs)
        return {"<=": lhs <= self.rhs, ">=": lhs >= self.rhs, "==": lhs == self.rhs}[self.op]

    @property
    def variables(self) -> set:
        return {v for v, _ in self.coeffs}


@dataclass(frozen=True)
class DistinctProviders:
    """Every new requirer of ``port`` is bound to ``arity`` distinct providers.

    Exact (Gale-Ryser style) condition over instance counts: sorting new
    requirer demands decreasingly, for every prefix of size s the summed
    demand is at most the sum over providers of min(residual capacity, s).
    """

    port: str
    requirers: tuple       # ((type, arity), ...)
    providers: tuple       # ((type, capacity or None), ...)
    existing: tuple        # residual capacities of already-placed providers
    label: str

    @property
    def variables(self) -> set:
        return {count_var(t) for t, _ in self.requirers} | {count_var(t) for t, _ in self.providers}


@dataclass(frozen=True)
class PackingConstraint:
    """New instances must fit, per resource, onto existing free capacity plus
    at most ``budget`` fresh nodes of each type."""

    budget: tuple          # ((node type, max count), ...)
    label: str = "per-node resource packing"

    variables = frozenset()


def count_var(type_name: str) -> str:
    return f"n[{type_name}]"


def binding_var(requirer: str, port: str, provider: str) -> str:
    return f"b[{requirer},{port},{provider}]"


@dataclass
class ConstraintSystem:
    universe: Universe
    request: TargetRequest
    existing: Configuration
    order: tuple                     # branching order over service types
    count_vars: dict                 # type -> variable name
    binding_vars: dict               # (requirer type, port, provider type) -> variable name
    lower: dict
    upper: dict
    existing_counts: dict
    constraints: list
    node_budget: dict
    objective: tuple = ("total node cost", "instance count")

    @property
    def variables(self) -> set:
        return set(self.count_vars.values()) | set(self.binding_vars.values())

    @property
    def resources(self) -> tuple:
        return self.universe.resource_names

    def demand(self, type_name: str) -> tuple:
        cons = self.universe.service(type_name).consumption
        return tuple(cons.get(r, 0) for r in self.resources)

    def bin_specs(self) -> list:
        return [
            BinSpec(n.name, Fraction(str(n.cost)), tuple(n.capacity.get(r, 0) for r in self.resources),
                    self.node_budget.get(n.name, 0))
            for n in sorted(self.universe.node_types, key=lambda n: n.name)
        ]

    def existing_free(self) -> list:
        usage = node_usage(self.universe, self.existing)
        out = []
        for node_id in sorted(self.existing.nodes):
            cap = self.universe.node_type(self.existing.nodes[node_id]).capacity
            out.append(tuple(cap.get(r, 0) - usage[node_id].get(r, 0) for r in self.resources))
        return out

    def counts_feasible(self, counts: Mapping[str, int]) -> bool:
        """All count-level constraints: bounds and distinct-provider matchings."""
        values = {count_var(t): counts.get(t, 0) for t in self.count_vars}
        for c in self.constraints:
            if isinstance(c, LinearConstraint) and c.variables <= set(values):
                if not c.holds(values):
                    return False
            elif isinstance(c, DistinctProviders) and not distinct_feasible(c, counts, self.existing_counts):
                return False
        return True


def _new(counts, existing_counts, t):
    return counts.get(t, 0) - existing_counts.get(t, 0)


def distinct_feasible(c: DistinctProviders, counts, existing_counts) -> bool:
    demands = []
    for t, k in c.requirers:
        if k > 0:
            demands.extend([k] * _new(counts, existing_counts, t))
    if not demands:
        return True
    caps = list(c.existing)
    for t, cap in c.providers:
        caps.extend([cap] * _new(counts, existing_counts, t))
    demands.sort(reverse=True)
    if demands[0] > sum(1 for x in caps if x is None or x > 0):
        return False
    finite = sorted(x for x in caps if x is not None)
    unbounded = len(caps) - len(finite)
    prefix = 0
    for s, d in enumerate(demands, start=1):
        prefix += d
        supply = unbounded * s + sum(min(x, s) for x in finite)
        if prefix > supply:
            return False
    return True


def _fit_caps(universe: Universe, node_budget, free_existing, resources) -> dict:
    """Max instances of each type that fit in all budgeted nodes plus free space."""
    out = {}
    for s in universe.service_types:
        d = tuple(s.consumption.get(r, 0) for r in resources)
        total = 0
        bins = [(free, 1) for free in free_existing] + [
            (tuple(n.capacity.get(r, 0) for r in resources), node_budget.get(n.name, 0))
            for n in universe.node_types
        ]
        for free, mult in bins:
            per = min((f // x for f, x in zip(free, d) if x > 0), default=None)
            if per is None:
                per = 10 ** 9 if all(f >= 0 for f in free) else 0
            total += per * mult
        out[s.name] = total
    return out


def _ports_required(universe: Universe, types) -> list:
    return sorted({r.port for t in types for r in universe.service(t).requires if r.arity > 0})


def _existing_residuals(universe: Universe, existing: Configuration, port: str) -> tuple:
    fan_in = {}
    for b in existing.bindings:
        if b.port == port:
            fan_in.setdefault(b.provider, set()).add(b.requirer)
    out = []
    for inst in sorted(existing.instances):
        pp = universe.service(existing.instances[inst].type).provided(port)
        if pp is not None:
            out.append(None if pp.capacity is None else max(0, pp.capacity - len(fan_in.get(inst, ()))))
    return tuple(out)


def instance_bound(universe: Universe, request: TargetRequest,
                   node_budget: Optional[Mapping[str, int]] = None,
                   existing: Optional[Configuration] = None) -> dict:
    """Upper bound on the instances of each type an optimal solution can use.

    Start from the requested minimum (counts and throughput-derived counts,
    never below what ``existing`` already runs).  Then, to a fixpoint, every
    provider type B of a required port p is bounded by the number of new
    instances B would need to serve all new demand on p alone:
    ``max(max arity, ceil(sum(arity * new requirers) / capacity(B)))``.
    Bounds are clipped to how many instances fit in the node budget.
    """
    existing = existing or Configuration()
    node_budget = _budget(universe, node_budget)
    have = dict(existing.counts())
    lower = request.minimum_counts(universe)
    ub = {s.name: max(lower.get(s.name, 0), have.get(s.name, 0)) for s in universe.service_types}
    resources = universe.resource_names
    free = []
    usage = node_usage(universe, existing)
    for node_id, nt in sorted(existing.nodes.items()):
        cap = universe.node_type(nt).capacity
        free.append(tuple(cap.get(r, 0) - usage[node_id].get(r, 0) for r in resources))
    cap_fit = _fit_caps(universe, node_budget, free, resources)

    for _ in range(4 * len(ub) + 8):
        changed = False
        active = [t for t in ub if ub[t] > have.get(t, 0)]
        for port in _ports_required(universe, active):
            reqs = [(t, universe.service(t).requirement(port).arity) for t in active
                    if universe.service(t).requirement(port) is not None]
            demand = sum(k * (ub[t] - have.get(t, 0)) for t, k in reqs)
            kmax = max((k for t, k in reqs), default=0)
            if demand == 0:
                continue
            providers = universe.providers_of(port)
            if not providers and not any(x is None or x > 0 for x in _existing_residuals(universe, existing, port)):
                raise UnprovidablePort(f"port {port!r} is required but no service type provides it")
            for p in providers:
                cap = p.provided(port).capacity
                if cap == 0:
                    continue
                need = kmax if cap is None else max(kmax, -(-demand // cap))
                bound = min(have.get(p.name, 0) + need, max(cap_fit[p.name], have.get(p.name, 0)))
                if bound > ub[p.name]:
                    ub[p.name] = bound
                    changed = True
        if not changed:
            break
    return ub


def _budget(universe, node_budget):
    node_budget = dict(node_budget or {})
    for n in universe.node_types:
        node_budget.setdefault(n.name, DEFAULT_NODE_BUDGET)
    return node_budget


def _branch_order(universe: Universe, types) -> tuple:
    """Requirers before providers (Kahn), ties and cycles resolved by name."""
    types = set(types)
    edges = {t: set() for t in types}   # requirer -> providers
    for t in types:
        for r in universe.service(t).requires:
            for p in universe.providers_of(r.port):
                if p.name in types and p.name != t:
                    edges[t].add(p.name)
    indeg = {t: 0 for t in types}
    for t in types:
        for p in edges[t]:
            indeg[p] += 1
    out, done = [], set()
    while len(out) < len(types):
        ready = sorted(t for t in types if t not in done and indeg[t] == 0)
        if not ready:
            ready = sorted(t for t in types if t not in done)[:1]
        t = ready[0]
        out.append(t)
        done.add(t)
        for p in edges[t]:
            indeg[p] -= 1
    return tuple(out)


def encode(universe: Universe, request: TargetRequest,
           node_budget: Optional[Mapping[str, int]] = None,
           existing: Optional[Configuration] = None,
           bounds: Optional[Mapping[str, int]] = None) -> ConstraintSystem:
    """Build the constraint system for ``request``.

    ``bounds`` optionally caps per-type instance counts below
    :func:`instance_bound` (used to compare against the exhaustive oracle).
    """
    existing = existing or Configuration()
    check = check_correct(universe, existing)
    if not check.ok:
        raise ModelError(f"existing configuration is not correct: {check.violations[0].message}")
    node_budget = _budget(universe, node_budget)
    have = dict(existing.counts())
    lower_req = request.minimum_counts(universe)
    upper = instance_bound(universe, request, node_budget, existing)
    if bounds is not None:
        for t, b in bounds.items():
            if t in upper:
                upper[t] = max(min(upper[t], b), have.get(t, 0))
    lower = {t: max(lower_req.get(t, 0), have.get(t, 0)) for t in upper}
    types = [t for t in upper if upper[t] > 0 or lower[t] > 0]
    order = _branch_order(universe, types)

    count_vars = {t: count_var(t) for t in order}
    constraints = []
    for t in order:
        if lower[t] > 0:
            constraints.append(LinearConstraint(((count_vars[t], 1),), ">=", Fraction(lower[t]),
                                                f"presence of {t}"))
        constraints.append(LinearConstraint(((count_vars[t], 1),), "<=", Fraction(upper[t]),
                                            f"instance bound of {t}"))

    binding_vars = {}
    for port in _ports_required(universe, order):
        reqs = tuple((t, universe.service(t).requirement(port).arity) for t in order
                     if universe.service(t).requirement(port) is not None)
        provs = tuple((p.name, p.provided(port).capacity) for p in universe.providers_of(port)
                      if p.name in count_vars)
        for rt, k in reqs:
            row = []
            for pt, _ in provs:
                v = binding_var(rt, port, pt)
                binding_vars[rt, port, pt] = v
                row.append((v, 1))
            # new bindings of the new requirers of rt on this port
            constraints.append(LinearConstraint(
                tuple(row) + ((count_vars[rt], -k),), ">=", Fraction(-k * have.get(rt, 0)),
                f"{rt} needs {k} providers on {port}"))
        existing_res = _existing_residuals(universe, existing, port)
        for pt, cap in provs:
            if cap is None:
                continue
            row = tuple((binding_var(rt, port, pt), 1) for rt, _ in reqs)
            used_existing = sum(cap - x for x in _existing_residuals_of_type(universe, existing, port, pt))
            constraints.append(LinearConstraint(
                row + ((count_vars[pt], -cap),), "<=", Fraction(-used_existing),
                f"capacity of {pt} on {port}"))
        constraints.append(DistinctProviders(port, reqs, provs, existing_res,
                                             f"distinct providers on {port}"))
    constraints.append(PackingConstraint(tuple(sorted(node_budget.items()))))

    return ConstraintSystem(
        universe=universe, request=request, existing=existing, order=order,
        count_vars=count_vars, binding_vars=binding_vars, lower=lower, upper=upper,
        existing_counts=have, constraints=constraints, node_budget=node_budget,
    )


def _existing_residuals_of_type(universe, existing, port, type_name):
    fan_in = {}
    for b in existing.bindings:
        if b.port == port:
            fan_in.setdefault(b.provider, set()).add(b.requirer)
    cap = universe.service(type_name).provided(port).capacity
    return [cap - len(fan_in.get(i, ())) for i in existing.instances_of(type_name)]


# -- search --------------------------------------------------------------------

@dataclass
class Assignment:
    """A satisfying integer assignment: per-type totals plus node placement."""

    counts: dict
    packing: PackResult
    existing: Configuration = field(default_factory=Configuration)


@dataclass
class Solution:
    configuration: Optional[Configuration]
    objective_cost: Optional[float]
    status: Status
    instance_count: int = 0
    timed_out: bool = False
    wall_time: float = 0.0
    assignment: Optional[Assignment] = None


class _Search:
    def __init__(self, system: ConstraintSystem, deadline):
        self.sys = system
        self.deadline = deadline
        self.u = system.universe
        self.order = system.order
        self.specs = system.bin_specs()
        self.free = system.existing_free()
        self.have = system.existing_counts
        self.demands = {t: system.demand(t) for t in self.order}
        self.distinct = [c for c in system.constraints if isinstance(c, DistinctProviders)]
        self.best = None        # (cost, count, counts, packing)
        self.feasible_seen = []
        self.ratio = self._cost_ratios()
        self.free_total = [sum(f[r] for f in self.free) for r in range(len(system.resources))]
        self.nodes_visited = 0

    def _cost_ratios(self):
        out = []
        for r in range(len(self.sys.resources)):
            ratios = [s.cost / s.capacity[r] for s in self.specs if s.capacity[r] > 0 and s.budget > 0]
            out.append(min(ratios) if ratios else None)
        return out

    def lp_bound(self, counts) -> Fraction:
        best = Fraction(0)
        for r, ratio in enumerate(self.ratio):
            need = sum(self.demands[t][r] * (counts[t] - self.have.get(t, 0)) for t in self.order)
            need -= self.free_total[r]
            if need > 0:
                if ratio is None:
                    return None
                best = max(best, need * ratio)
        return best

    def propagate(self, lb, ub, fixed):
        lb = dict(lb)
        for _ in range(2 * len(self.order) + 2):
            changed = False
            for c in self.distinct:
                demand = sum(k * (lb[t] - self.have.get(t, 0)) for t, k in c.requirers)
                kmax = max((k for t, k in c.requirers if lb[t] > self.have.get(t, 0)), default=0)
                if demand == 0:
                    continue
                ex_cap = sum(float("inf") if x is None else x for x in c.existing)
                ex_cnt = sum(1 for x in c.existing if x is None or x > 0)
                for pt, cap in c.providers:
                    if pt in fixed:
                        continue
                    other_cap, other_cnt = ex_cap, ex_cnt
                    for qt, qcap in c.providers:
                        if qt == pt:
                            continue
                        extra = ub[qt] - self.have.get(qt, 0)
                        if extra > 0:
                            other_cap += float("inf") if qcap is None else qcap * extra
                            other_cnt += extra if (qcap is None or qcap > 0) else 0
                    need = 0
                    if other_cap < demand:
                        if cap == 0:
                            return None
                        need = 1 if cap is None else -(-(demand - int(other_cap)) // cap)
                    need = max(need, kmax - other_cnt)
                    want = self.have.get(pt, 0) + need
                    if want > lb[pt]:
                        if want > ub[pt]:
                            return None
                        lb[pt] = want
                        changed = True
            if not changed:
                return lb
        return lb

    def dominated(self, vec):
        return any(all(vec[t] >= w[t] for t in self.order) for w in self.feasible_seen)

    def worse_than_best(self, cost, count):
        return self.best is not None and (cost, count) >= (self.best[0], self.best[1])

    def leaf(self, counts):
        for c in self.distinct:
            if not distinct_feasible(c, counts, self.have):
                return
        items = {t: counts[t] - self.have.get(t, 0) for t in self.order}
        pack = min_cost_packing(items, self.demands, self.specs, self.free, self.deadline)
        if pack is None:
            return
        count = sum(counts.values())
        self.feasible_seen.append(dict(counts))
        if not self.worse_than_best(pack.cost, count):
            self.best = (pack.cost, count, dict(counts), pack)

    def run(self):
        lb0 = {t: self.sys.lower[t] for t in self.order}
        ub = {t: self.sys.upper[t] for t in self.order}
        self.dfs(0, lb0, ub, {})

    def dfs(self, depth, lb, ub, fixed):
        self.nodes_visited += 1
        if self.nodes_visited % 256 == 0 and self.deadline is not None and time.monotonic() > self.deadline:
            raise SearchTimeout
        lb = self.propagate(lb, ub, fixed)
        if lb is None:
            return
        bound = self.lp_bound(lb)
        if bound is None or self.worse_than_best(bound, sum(lb.values())):
            return
        if self.dominated(lb):
            return
        if depth == len(self.order):
            self.leaf(lb)
            return
        t = self.order[depth]
        for v in range(lb[t], ub[t] + 1):
            nlb = dict(lb)
            nlb[t] = v
            nfixed = dict(fixed)
            nfixed[t] = v
            nub = dict(ub)
            nub[t] = v
            self.dfs(depth + 1, nlb, nub, nfixed)


def solve(system: ConstraintSystem, time_budget: Optional[float] = 60.0) -> Solution:
    """Branch-and-bound for the lexicographic (cost, instance count) optimum."""
    start = time.monotonic()
    deadline = None if time_budget is None else start + time_budget
    search = _Search(system, deadline)
    timed_out = False
    try:
        search.run()
    except SearchTimeout:
        timed_out = True
    elapsed = time.monotonic() - start
    if search.best is None:
        status = Status.TIMED_OUT if timed_out else Status.INFEASIBLE
        return Solution(None, None, status, timed_out=timed_out, wall_time=elapsed)
    cost, count, counts, pack = search.best
    assignment = Assignment(counts, pack, system.existing)
    config = concretize(assignment, system.universe)
    status = Status.FEASIBLE if timed_out else Status.OPTIMAL
    return Solution(config, total_cost(config, system.universe), status, count,
                    timed_out, elapsed, assignment)


def synthesize(universe: Universe, request: TargetRequest,
               node_budget: Optional[Mapping[str, int]] = None,
               existing: Optional[Configuration] = None,
               time_budget: Optional[float] = 60.0) -> Solution:
    """encode + solve in one call."""
    return solve(encode(universe, request, node_budget, existing), time_budget)


# -- concretisation ------------------------------------------------------------

def _fresh_ids(prefix: str, taken: set, n: int) -> list:
    out, k = [], 1
    while len(out) < n:
        cand = f"{prefix}-{k}"
        if cand not in taken:
            out.append(cand)
            taken.add(cand)
        k += 1
    return out


def concretize(assignment: Assignment, universe: Universe) -> Configuration:
    """Turn aggregate counts and a placement into concrete instances and bindings.

    New requirers (largest arity first, then by id) bind to the providers with
    the most residual capacity; equal residuals are taken round-robin from a
    rotating pointer over providers sorted by id.
    """
    base = assignment.existing
    pack = assignment.packing
    nodes = dict(base.nodes)
    instances = dict(base.instances)
    bindings = set(base.bindings)

    old_nodes = sorted(base.nodes)
    taken_nodes = set(nodes)
    new_node_ids = []
    for nt in pack.new_bins:
        nid = _fresh_ids(nt, taken_nodes, 1)[0]
        nodes[nid] = nt
        new_node_ids.append(nid)
    bin_ids = old_nodes + new_node_ids
    if len(pack.contents) != len(bin_ids):
        raise InternalError("packing layout does not match node list")

    taken_inst = set(instances)
    new_instances = []
    for node_id, content in zip(bin_ids, pack.contents):
        for t in sorted(content):
            for iid in _fresh_ids(t, taken_inst, content[t]):
                instances[iid] = Placement(t, node_id)
                new_instances.append(iid)
    have = base.counts()
    for t, c in assignment.counts.items():
        placed = sum(1 for p in instances.values() if p.type == t)
        if placed != c:
            raise InternalError(f"placement holds {placed} instances of {t!r}, counts say {c}")
    if sum(have.values()) + len(new_instances) != len(instances):
        raise InternalError("instance bookkeeping mismatch")

    ports = sorted({r.port for i in new_instances for r in universe.service(instances[i].type).requires})
    for port in ports:
        reqs = []
        for i in new_instances:
            r = universe.service(instances[i].type).requirement(port)
            if r is not None and r.arity > 0:
                reqs.append((r.arity, i))
        reqs.sort(key=lambda x: (-x[0], x[1]))
        providers = sorted(i for i, p in instances.items()
                           if universe.service(p.type).provided(port) is not None)
        residual = []
        for i in providers:
            cap = universe.service(instances[i].type).provided(port).capacity
            used = sum(1 for b in bindings if b.port == port and b.provider == i)
            residual.append(math.inf if cap is None else cap - used)
        pointer = 0
        n = len(providers)
        for arity, req in reqs:
            ranked = sorted(range(n), key=lambda j: (-residual[j], (j - pointer) % n))
            chosen = [j for j in ranked if residual[j] > 0 and providers[j] != req][:arity]
            if len(chosen) < arity:
                raise InternalError(f"cannot give {req!r} {arity} distinct providers on {port!r}")
            for j in chosen:
                residual[j] -= 1
                bindings.add(Binding(port, req, providers[j]))
            pointer = (max(chosen, key=lambda j: (j - pointer) % n) + 1) % n

    config = Configuration(nodes, instances, bindings)
    report = check_correct(universe, config)
    if not report.ok:
        raise InternalError(f"concretised configuration is incorrect: {report.violations[0].message}")
    return config
