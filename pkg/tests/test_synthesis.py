import random

import pytest

from microdeploy.model import (
    Configuration,
    MicroserviceType,
    Mode,
    NodeType,
    ProvidedPort,
    Requirement,
    ResourceKind,
    Universe,
    ViolationKind,
    check_correct,
    total_cost,
    validate_universe,
)
from microdeploy.oracle import brute_force_optimal
from microdeploy.synthesis import (
    Assignment,
    LinearConstraint,
    PackingConstraint,
    Status,
    TargetRequest,
    ThroughputTarget,
    UnprovidablePort,
    concretize,
    encode,
    instance_bound,
    solve,
    synthesize,
)
from microdeploy.packing import PackResult
from generators import random_budget, random_request, random_universe

CPU = (ResourceKind("cpu"),)


def one_type(cost=100, cap=1):
    return Universe(CPU, [MicroserviceType("A", consumption={"cpu": 1})], [NodeType("n", cost, {"cpu": cap})])


def provider_universe(capacity=2, mode=Mode.STRONG):
    a = MicroserviceType("A", requires=[Requirement("p", 1, mode)], consumption={"cpu": 1})
    b = MicroserviceType("B", provides=[ProvidedPort("p", capacity)], consumption={"cpu": 1})
    return Universe(CPU, [a, b], [NodeType("n", 10, {"cpu": 1})])


def test_single_instance_request():
    sol = synthesize(one_type(), TargetRequest({"A": 1}))
    assert sol.status is Status.OPTIMAL and sol.objective_cost == 100
    assert check_correct(one_type(), sol.configuration).ok


def test_colocation_beats_two_nodes():
    u = Universe(CPU, [MicroserviceType("A", consumption={"cpu": 1}), MicroserviceType("B", consumption={"cpu": 1})],
                 [NodeType("small", 100, {"cpu": 2})])
    req = TargetRequest({"A": 1, "B": 1})
    sol = synthesize(u, req)
    assert sol.status is Status.OPTIMAL and sol.objective_cost == 100
    assert brute_force_optimal(u, req, {"A": 2, "B": 2}, {"small": 3}).cost == 100


def test_request_beyond_budget_is_infeasible():
    sol = synthesize(one_type(), TargetRequest({"A": 4}), node_budget={"n": 3})
    assert sol.status is Status.INFEASIBLE and sol.configuration is None


def test_encode_single_type():
    system = encode(one_type(), TargetRequest({"A": 1}))
    linear = [c for c in system.constraints if isinstance(c, LinearConstraint)]
    assert [c.op for c in linear if c.label.startswith("presence")] == [">="]
    assert any(isinstance(c, PackingConstraint) for c in system.constraints)
    assert set(system.count_vars) == {"A"}


@pytest.mark.parametrize("n_a", [1, 2, 3])
def test_encode_forces_enough_providers(n_a):
    u = provider_universe(capacity=2)
    system = encode(u, TargetRequest({"A": n_a}), {"n": 10})
    need = -(-n_a // 2)
    assert system.upper["B"] >= need
    for b in range(0, system.upper["B"] + 1):
        exact = {"A": n_a, "B": b}
        oracle = brute_force_optimal(u, TargetRequest(exact), exact, {"n": 10})
        assert system.counts_feasible(exact) == oracle.feasible == (b >= need)


def test_encode_undeployable_type_is_unsatisfiable():
    u = Universe(CPU, [MicroserviceType("A", consumption={"cpu": 9})], [NodeType("n", 1, {"cpu": 8})])
    system = encode(u, TargetRequest({"A": 1}), {"n": 5})
    assert solve(system).status is Status.INFEASIBLE


def test_unprovidable_port_raises():
    u = Universe(CPU, [MicroserviceType("A", requires=[Requirement("db")], consumption={"cpu": 1})],
                 [NodeType("n", 1, {"cpu": 1})])
    with pytest.raises(UnprovidablePort):
        encode(u, TargetRequest({"A": 1}))


def _assignment(u, counts):
    contents = [{t: 1} for t in sorted(counts) for _ in range(counts[t])]
    return Assignment(dict(counts), PackResult(0, ["n"] * len(contents), contents))


def test_concretize_no_requirements():
    config = concretize(_assignment(one_type(), {"A": 1}), one_type())
    assert len(config.instances) == 1 and not config.bindings


def test_concretize_forced_provider():
    u = provider_universe(capacity=2)
    config = concretize(_assignment(u, {"A": 2, "B": 1}), u)
    assert len(config.bindings) == 2 and len({b.provider for b in config.bindings}) == 1


def test_concretize_splits_across_providers():
    u = provider_universe(capacity=2)
    config = concretize(_assignment(u, {"A": 3, "B": 2}), u)
    assert check_correct(u, config).ok
    loads = sorted(sum(1 for b in config.bindings if b.provider == p) for p in config.instances_of("B"))
    assert loads == [1, 2]


def test_instance_bound_examples():
    assert instance_bound(one_type(), TargetRequest({"A": 1})) == {"A": 1}
    assert instance_bound(provider_universe(2), TargetRequest({"A": 4}))["B"] == 2


def test_instance_bound_throughput():
    from microdeploy.pipeline import PipelineSpec, Stage

    u = Universe(CPU, [MicroserviceType("S", consumption={"cpu": 1}, max_load=10_000),
                       MicroserviceType("SLB", consumption={"cpu": 1}, max_load=70_000)],
                 [NodeType("n", 1, {"cpu": 4})])
    spec = PipelineSpec([Stage("S", "S", "SLB")], [], "S")
    bound = instance_bound(u, TargetRequest({}, ThroughputTarget(90_000, spec)))
    assert bound["S"] >= 9 and bound["SLB"] >= 2


def test_oracle_zero_and_undeployable():
    res = brute_force_optimal(one_type(), TargetRequest({"A": 0}), {"A": 2}, {"n": 2})
    assert res.feasible and res.cost == 0 and res.witness == Configuration()
    u = Universe(CPU, [MicroserviceType("A", consumption={"cpu": 9})], [NodeType("n", 1, {"cpu": 8})])
    assert not brute_force_optimal(u, TargetRequest({"A": 1}), {"A": 2}, {"n": 2}).feasible


def _random_case(seed):
    rng = random.Random(seed)
    u = random_universe(rng)
    req = random_request(rng, u)
    budget = random_budget(rng, u)
    return u, req, budget


def test_solver_agrees_with_oracle_sample():
    checked = 0
    for seed in range(400):
        u, req, budget = _random_case(seed)
        if not validate_universe(u).ok:
            continue
        try:
            system = encode(u, req, budget, bounds={s.name: 4 for s in u.service_types})
        except UnprovidablePort:
            continue
        sol = solve(system, time_budget=30)
        ref = brute_force_optimal(u, req, system.upper, budget)
        assert ref.feasible == (sol.configuration is not None), seed
        if ref.feasible:
            assert (sol.objective_cost, sol.instance_count) == (ref.cost, ref.instance_count), seed
            assert check_correct(u, sol.configuration).ok
            assert check_correct(u, ref.witness).ok
        checked += 1
    assert checked >= 200


def test_deterministic():
    for seed in range(40):
        u, req, budget = _random_case(seed)
        if not validate_universe(u).ok:
            continue
        try:
            a = synthesize(u, req, budget, time_budget=10)
            b = synthesize(u, req, budget, time_budget=10)
        except UnprovidablePort:
            continue
        assert a.objective_cost == b.objective_cost and a.configuration == b.configuration


def test_cost_monotone_in_request():
    for seed in range(150):
        u, req, budget = _random_case(seed)
        if not validate_universe(u).ok:
            continue
        try:
            base = synthesize(u, req, budget, time_budget=10)
        except UnprovidablePort:
            continue
        if base.configuration is None:
            continue
        t = sorted(req.required_instances)[0]
        more = dict(req.required_instances)
        more[t] += 1
        try:
            bigger = synthesize(u, TargetRequest(more), budget, time_budget=10)
        except UnprovidablePort:
            continue
        if bigger.configuration is not None:
            assert bigger.objective_cost >= base.objective_cost


def test_incremental_keeps_existing():
    u = provider_universe(capacity=2)
    first = synthesize(u, TargetRequest({"A": 1}), {"n": 10}).configuration
    grown = synthesize(u, TargetRequest({"A": 3}), {"n": 10}, existing=first).configuration
    assert check_correct(u, grown).ok
    for i, p in first.instances.items():
        assert grown.instances[i] == p
    assert set(first.bindings) <= set(grown.bindings)
    assert total_cost(grown, u) == 10 * len(grown.nodes)


def test_solutions_always_correct():
    for seed in range(400, 700):
        u, req, budget = _random_case(seed)
        if not validate_universe(u).ok:
            continue
        try:
            sol = synthesize(u, req, budget, time_budget=10)
        except UnprovidablePort:
            continue
        if sol.configuration is not None:
            assert check_correct(u, sol.configuration).ok
            assert ViolationKind.UNSATISFIED_REQUIREMENT not in check_correct(u, sol.configuration).kinds()
