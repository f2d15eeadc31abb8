"""Exact minimum-cost multi-resource bin packing over priced node types.

Node-type vectors are enumerated best-first in increasing cost; the first one
whose bins admit a packing of the items is optimal.  Feasibility of a fixed
bin set is tried with first-fit-decreasing and, failing that, settled by an
exhaustive search with symmetry breaking.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence


class SearchTimeout(Exception):
    pass


@dataclass(frozen=True)
class BinSpec:
    name: str
    cost: Fraction
    capacity: tuple
    budget: int


@dataclass
class PackResult:
    cost: Fraction
    new_bins: list          # node type names of the freshly provisioned bins
    contents: list          # per bin (existing first, then new): {item type: count}


def _check_deadline(deadline):
    if deadline is not None and time.monotonic() > deadline:
        raise SearchTimeout


def _fits(demand, free):
    return all(d <= f for d, f in zip(demand, free))


def _sub(free, demand):
    return tuple(f - d for f, d in zip(free, demand))


def _item_order(items, demands, scale):
    """Item types largest-first by normalised size, then by name."""
    def size(t):
        return sum(Fraction(d, s) for d, s in zip(demands[t], scale) if s)
    return sorted((t for t, c in items.items() if c > 0), key=lambda t: (-size(t), t))


def first_fit_decreasing(items, demands, frees, order):
    """Returns per-bin contents or None."""
    frees = list(frees)
    contents = [dict() for _ in frees]
    for t in order:
        d = demands[t]
        for _ in range(items[t]):
            for b, free in enumerate(frees):
                if _fits(d, free):
                    frees[b] = _sub(free, d)
                    contents[b][t] = contents[b].get(t, 0) + 1
                    break
            else:
                return None
    return contents


def exact_pack(items, demands, frees, order, deadline=None):
    """Exhaustive feasibility search; returns per-bin contents or None."""
    seq = [t for t in order for _ in range(items[t])]
    n_bins = len(frees)
    total = [sum(demands[t][r] * items[t] for t in order) for r in range(len(frees[0]) if frees else 0)]
    if frees and any(sum(f[r] for f in frees) < total[r] for r in range(len(total))):
        return None
    failed = set()
    assign = [0] * len(seq)
    state = list(frees)
    steps = [0]

    def rec(i, remaining):
        if i == len(seq):
            return True
        steps[0] += 1
        if steps[0] % 2048 == 0:
            _check_deadline(deadline)
        t = seq[i]
        new_type = i == 0 or seq[i - 1] != t
        if new_type:
            key = (i, tuple(sorted(state)))
            if key in failed:
                return False
        lo = 0 if new_type else assign[i - 1]
        d = demands[t]
        if any(sum(f[r] for f in state) < remaining[r] for r in range(len(remaining))):
            if new_type:
                failed.add(key)
            return False
        tried = set()
        rest = tuple(x - y for x, y in zip(remaining, d))
        for b in range(lo, n_bins):
            free = state[b]
            if free in tried or not _fits(d, free):
                continue
            tried.add(free)
            state[b] = _sub(free, d)
            assign[i] = b
            if rec(i + 1, rest):
                return True
            state[b] = free
        if new_type:
            failed.add(key)
        return False

    if not rec(0, tuple(total)):
        return None
    contents = [dict() for _ in range(n_bins)]
    for t, b in zip(seq, assign):
        contents[b][t] = contents[b].get(t, 0) + 1
    return contents


def min_cost_packing(
    items: Mapping[str, int],
    demands: Mapping[str, tuple],
    bin_specs: Sequence[BinSpec],
    existing: Sequence[tuple] = (),
    deadline: Optional[float] = None,
) -> Optional[PackResult]:
    """Cheapest set of new bins that, with ``existing`` free capacities, hosts ``items``.

    ``demands`` and capacities are resource vectors in a common order.  Ties on
    cost go to fewer nodes, then to the lexicographically smallest node vector
    in ``bin_specs`` order.  Returns None when no packing exists within budget.
    """
    items = {t: c for t, c in items.items() if c > 0}
    dims = len(bin_specs[0].capacity) if bin_specs else (len(existing[0]) if existing else 0)
    if not items:
        return PackResult(Fraction(0), [], [dict() for _ in existing])
    scale = [max([b.capacity[r] for b in bin_specs] + [e[r] for e in existing] + [0]) for r in range(dims)]
    order = _item_order(items, demands, scale)

    # every item type must fit some bin at all
    for t in order:
        if not any(_fits(demands[t], e) for e in existing) and not any(
            _fits(demands[t], b.capacity) for b in bin_specs if b.budget > 0
        ):
            return None
    need = [sum(demands[t][r] * c for t, c in items.items()) for r in range(dims)]
    have_max = [sum(e[r] for e in existing) + sum(b.capacity[r] * b.budget for b in bin_specs)
                for r in range(dims)]
    if any(n > h for n, h in zip(need, have_max)):
        return None

    fallback = _open_on_demand(items, demands, bin_specs, existing, order)
    k = len(bin_specs)
    start = (0,) * k
    heap = [(Fraction(0), 0, start, 0)]
    seen = {start}
    while heap:
        _check_deadline(deadline)
        cost, count, vec, last = heapq.heappop(heap)
        if fallback is not None and cost > fallback.cost:
            return fallback
        cap = [sum(e[r] for e in existing) + sum(vec[i] * bin_specs[i].capacity[r] for i in range(k))
               for r in range(dims)]
        if all(c >= n for c, n in zip(cap, need)):
            frees = list(existing) + [bin_specs[i].capacity for i in range(k) for _ in range(vec[i])]
            contents = first_fit_decreasing(items, demands, frees, order)
            if contents is None:
                contents = exact_pack(items, demands, frees, order, deadline)
            if contents is not None:
                new_bins = [bin_specs[i].name for i in range(k) for _ in range(vec[i])]
                return PackResult(cost, new_bins, contents)
        for i in range(last, k):
            if vec[i] < bin_specs[i].budget:
                child = vec[:i] + (vec[i] + 1,) + vec[i + 1:]
                if child not in seen:
                    seen.add(child)
                    heapq.heappush(heap, (cost + bin_specs[i].cost, count + 1, child, i))
    return fallback


def _open_on_demand(items, demands, bin_specs, existing, order):
    """First-fit-decreasing that opens the cheapest fitting node type when stuck.

    Gives an upper bound that keeps the best-first enumeration finite.
    """
    frees = list(existing)
    contents = [dict() for _ in frees]
    kinds = [None] * len(frees)
    used = [0] * len(bin_specs)
    ranked = sorted(range(len(bin_specs)), key=lambda i: (bin_specs[i].cost, i))
    for t in order:
        d = demands[t]
        for _ in range(items[t]):
            for b, free in enumerate(frees):
                if _fits(d, free):
                    break
            else:
                for i in ranked:
                    if used[i] < bin_specs[i].budget and _fits(d, bin_specs[i].capacity):
                        used[i] += 1
                        frees.append(bin_specs[i].capacity)
                        contents.append({})
                        kinds.append(i)
                        b = len(frees) - 1
                        break
                else:
                    return None
            frees[b] = _sub(frees[b], d)
            contents[b][t] = contents[b].get(t, 0) + 1
    # regroup new bins by node type order to match the PackResult layout
    n_old = len(existing)
    new = sorted(range(n_old, len(frees)), key=lambda b: (kinds[b], b))
    cost = sum((bin_specs[kinds[b]].cost for b in new), Fraction(0))
    return PackResult(cost, [bin_specs[kinds[b]].name for b in new],
                      contents[:n_old] + [contents[b] for b in new])
