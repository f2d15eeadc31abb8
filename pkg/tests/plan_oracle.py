"""Breadth-first search for any valid ordering of the edits between two configurations.

Used to confirm that a pair the planner rejects really has no plan built from
the direct edits (node creations/deletions, deployments with any admissible
choice of strong bindings, binds, unbinds and undeployments).
"""

import itertools
from collections import deque

from microdeploy.model import Binding, Mode, check_correct
from microdeploy.plan import Bind, CreateNode, DeleteNode, Deploy, StepError, Unbind, Undeploy, apply_action


def _candidates(source, target, universe):
    acts = [CreateNode(n, k) for n, k in target.nodes.items() if n not in source.nodes]
    acts += [DeleteNode(n) for n in source.nodes if n not in target.nodes]
    acts += [Undeploy(i) for i in source.instances if i not in target.instances]
    tgt_b = set(target.bindings)
    src_b = set(source.bindings)
    for i, p in target.instances.items():
        if i in source.instances:
            continue
        options = []
        for r in universe.service(p.type).strong_requirements:
            provs = sorted(b.provider for b in tgt_b if b.requirer == i and b.port == r.port)
            options.append([[(r.port, q) for q in c] for c in itertools.combinations(provs, r.arity)])
        for combo in itertools.product(*options):
            acts.append(Deploy(i, p.type, p.node, tuple(x for part in combo for x in part)))
    for b in tgt_b:
        acts.append(Bind(*b))
    for b in src_b - tgt_b:
        acts.append(Unbind(*b))
    return acts


def plan_exists(source, target, universe, limit=200_000) -> bool:
    acts = _candidates(source, target, universe)
    seen = {source.digest()}
    queue = deque([source])
    while queue:
        config = queue.popleft()
        if config == target:
            return True
        for a in acts:
            try:
                nxt = apply_action(config, a, universe)
            except StepError:
                continue
            key = nxt.digest()
            if key not in seen:
                seen.add(key)
                if len(seen) > limit:
                    raise RuntimeError("plan search space too large")
                queue.append(nxt)
    return False
