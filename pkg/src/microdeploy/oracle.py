"""Exhaustive reference solver for small deployment problems.

Deliberately shares nothing with the branch-and-bound: count vectors are
enumerated with ``itertools.product``, bindings are found by backtracking over
provider combinations, and placements by trying every node-type vector and
every assignment of instances to those nodes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Optional

from .model import Binding, Configuration, Placement, Universe, check_correct


class SearchSpaceTooLarge(Exception):
    pass


MAX_COUNT_VECTORS = 10 ** 7


@dataclass
class OracleResult:
    feasible: bool
    cost: Optional[float] = None
    instance_count: Optional[int] = None
    witness: Optional[Configuration] = None


def _requested(universe, request):
    out = dict(request.required_instances)
    if request.required_throughput is not None:
        tp = request.required_throughput
        for t, c in tp.pipeline.required_counts(tp.value, universe).items():
            out[t] = max(out.get(t, 0), c)
    return out


def _find_bindings(universe, inst_types):
    """Backtracking search for a binding set meeting all arities and capacities."""
    ids = sorted(inst_types)
    demands = []
    for i in ids:
        for r in universe.service(inst_types[i]).requires:
            if r.arity > 0:
                demands.append((i, r.port, r.arity))
    left = {}
    for i in ids:
        for p in universe.service(inst_types[i]).provides:
            left[i, p.port] = math.inf if p.capacity is None else p.capacity
    chosen = []

    def rec(k):
        if k == len(demands):
            return True
        req, port, arity = demands[k]
        cands = [i for i in ids if i != req and left.get((i, port), 0) > 0]
        for combo in itertools.combinations(cands, arity):
            for i in combo:
                left[i, port] -= 1
            chosen.extend(Binding(port, req, i) for i in combo)
            if rec(k + 1):
                return True
            del chosen[len(chosen) - arity:]
            for i in combo:
                left[i, port] += 1
        return False

    return list(chosen) if rec(0) else None


def _place(universe, inst_types, node_kinds):
    """Try every assignment of instances to the given nodes."""
    ids = sorted(inst_types, key=lambda i: (inst_types[i], i))
    resources = universe.resource_names
    free = [dict(universe.node_type(k).capacity) for k in node_kinds]
    where = {}

    def rec(k):
        if k == len(ids):
            return True
        cons = universe.service(inst_types[ids[k]]).consumption
        # instances of one type are interchangeable, as are nodes in equal states
        same = k > 0 and inst_types[ids[k - 1]] == inst_types[ids[k]]
        start = where[ids[k - 1]] if same else 0
        tried = set()
        for b in range(start, len(free)):
            state = (node_kinds[b], tuple(sorted(free[b].items())))
            if state in tried:
                continue
            tried.add(state)
            if all(cons.get(r, 0) <= free[b].get(r, 0) for r in resources):
                for r in resources:
                    free[b][r] = free[b].get(r, 0) - cons.get(r, 0)
                where[ids[k]] = b
                if rec(k + 1):
                    return True
                for r in resources:
                    free[b][r] += cons.get(r, 0)
        return False

    return dict(where) if rec(0) else None


def _port_totals_ok(universe, counts):
    need, have = {}, {}
    for t, c in counts.items():
        if c == 0:
            continue
        svc = universe.service(t)
        for r in svc.requires:
            need[r.port] = need.get(r.port, 0) + c * r.arity
        for p in svc.provides:
            cap = math.inf if p.capacity is None else p.capacity
            have[p.port] = have.get(p.port, 0) + c * cap
    return all(n <= have.get(port, 0) for port, n in need.items())


def brute_force_optimal(universe: Universe, request, bounds: Mapping[str, int],
                        node_budget: Mapping[str, int]) -> OracleResult:
    """Minimum (cost, instance count) over every count vector within ``bounds``."""
    names = sorted(s.name for s in universe.service_types)
    want = _requested(universe, request)
    ranges = []
    for t in names:
        lo = want.get(t, 0)
        hi = bounds.get(t, lo)
        ranges.append(range(lo, hi + 1))
    size = math.prod(len(r) for r in ranges)
    if size > MAX_COUNT_VECTORS:
        raise SearchSpaceTooLarge(f"{size} count vectors")

    kinds = sorted(n.name for n in universe.node_types)
    node_vectors = sorted(
        itertools.product(*(range(node_budget.get(k, 0) + 1) for k in kinds)),
        key=lambda v: (sum(c * universe.node_type(k).cost for c, k in zip(v, kinds)), sum(v), v),
    )

    room = {r: sum(node_budget.get(k, 0) * universe.node_type(k).capacity.get(r, 0) for k in kinds)
            for r in universe.resource_names}

    best = None
    for vec in itertools.product(*ranges):
        # cheap necessary conditions before the exponential searches
        if any(sum(c * universe.service(t).consumption.get(r, 0) for t, c in zip(names, vec)) > room[r]
               for r in room):
            continue
        if not _port_totals_ok(universe, dict(zip(names, vec))):
            continue
        inst_types = {}
        for t, c in zip(names, vec):
            for j in range(c):
                inst_types[f"{t}-{j + 1}"] = t
        binds = _find_bindings(universe, inst_types)
        if binds is None:
            continue
        for nv in node_vectors:
            cost = sum(c * universe.node_type(k).cost for c, k in zip(nv, kinds))
            if best is not None and (cost, len(inst_types)) >= (best[0], best[1]):
                break
            node_kinds = [k for k, c in zip(kinds, nv) for _ in range(c)]
            where = _place(universe, inst_types, node_kinds)
            if where is None:
                continue
            nodes = {f"node-{b + 1}": k for b, k in enumerate(node_kinds)}
            insts = {i: Placement(t, f"node-{where[i] + 1}") for i, t in inst_types.items()}
            best = (cost, len(inst_types), Configuration(nodes, insts, binds))
            break

    if best is None:
        return OracleResult(False)
    witness = best[2]
    report = check_correct(universe, witness)
    assert report.ok, report.violations
    return OracleResult(True, best[0], best[1], witness)
