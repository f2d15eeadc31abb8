import random

import pytest
from hypothesis import given, settings, strategies as st

from microdeploy.model import (
    Binding,
    Configuration,
    IssueKind,
    MicroserviceType,
    Mode,
    NodeType,
    ProvidedPort,
    Requirement,
    ResourceKind,
    Universe,
    UnknownType,
    ViolationKind,
    check_correct,
    total_cost,
    validate_universe,
)
from generators import random_budget, random_request, random_universe

CPU = (ResourceKind("cpu"),)


def lb_universe(cap=1):
    lb = MicroserviceType("LB", [ProvidedPort("p", cap)], [], {"cpu": 1})
    app = MicroserviceType("App", [], [Requirement("p", 1, Mode.WEAK)], {"cpu": 2})
    return Universe(CPU, [lb, app], [NodeType("n", 100, {"cpu": 2}), NodeType("big", 200, {"cpu": 8})])


def test_empty_configuration_is_correct():
    report = check_correct(lb_universe(), Configuration())
    assert report.ok and report.violations == []


def test_capacity_exceeded():
    u = lb_universe(cap=1)
    c = Configuration({"n1": "big"}, {"lb": ("LB", "n1"), "a": ("App", "n1"), "b": ("App", "n1")},
                      [("p", "a", "lb"), ("p", "b", "lb")])
    assert check_correct(u, c).kinds() == {ViolationKind.CAPACITY_EXCEEDED}


def test_resource_exceeded():
    u = lb_universe(cap=None)
    c = Configuration({"n1": "n", "n2": "n"}, {"lb": ("LB", "n2"), "a": ("App", "n1"), "b": ("App", "n1")},
                      [("p", "a", "lb"), ("p", "b", "lb")])
    assert check_correct(u, c).kinds() == {ViolationKind.RESOURCE_EXCEEDED}


def test_report_is_exhaustive():
    u = lb_universe(cap=1)
    c = Configuration({"n1": "n"}, {"a": ("App", "n1"), "b": ("App", "n1"), "lb": ("LB", "zz")},
                      [("p", "a", "a"), ("p", "b", "ghost")])
    kinds = check_correct(u, c).kinds()
    assert {ViolationKind.SELF_BINDING, ViolationKind.DANGLING_REFERENCE,
            ViolationKind.UNSATISFIED_REQUIREMENT, ViolationKind.RESOURCE_EXCEEDED} <= kinds


def test_duplicate_binding_detected():
    u = lb_universe(cap=None)
    c = Configuration({"n1": "big"}, {"lb": ("LB", "n1"), "a": ("App", "n1")},
                      [("p", "a", "lb"), ("p", "a", "lb")])
    assert ViolationKind.DUPLICATE in check_correct(u, c).kinds()


def test_weak_requirement_can_be_relaxed():
    u = lb_universe()
    c = Configuration({"n1": "n"}, {"a": ("App", "n1")})
    assert not check_correct(u, c).ok
    assert check_correct(u, c, require_weak=False).ok


def test_unknown_type_raises():
    with pytest.raises(UnknownType):
        check_correct(lb_universe(), Configuration({"n1": "huge"}, {}))


def test_total_cost():
    u = Universe(CPU, [MicroserviceType("A", consumption={"cpu": 1})],
                 [NodeType("c100", 100, {"cpu": 8}), NodeType("c200", 200, {"cpu": 8}),
                  NodeType("c400", 400, {"cpu": 8})])
    assert total_cost(Configuration(), u) == 0
    assert total_cost(Configuration({"x": "c100", "y": "c200"}), u) == 300
    five = Configuration({"x": "c400"}, {f"a{i}": ("A", "x") for i in range(5)})
    assert total_cost(five, u) == 400


def test_validate_universe():
    assert validate_universe(Universe()).ok
    needs_db = Universe(CPU, [MicroserviceType("A", requires=[Requirement("db", 1, "weak")])],
                        [NodeType("n", 1, {"cpu": 1})])
    report = validate_universe(needs_db)
    assert report.ok and IssueKind.UNPROVIDABLE_PORT in report.kinds()
    mem = (ResourceKind("mem"),)
    huge = Universe(mem, [MicroserviceType("A", consumption={"mem": 16384})], [NodeType("n", 1, {"mem": 8192})])
    assert IssueKind.UNDEPLOYABLE_TYPE in {i.kind for i in validate_universe(huge).errors}


def test_validate_universe_structural_errors():
    s = MicroserviceType("A", [ProvidedPort("p")], [Requirement("p", 1, "weak")], {"gpu": 1}, max_load=0)
    u = Universe(CPU, [s, MicroserviceType("A")], [NodeType("n", 1, {})])
    kinds = {i.kind for i in validate_universe(u).errors}
    assert {IssueKind.DUPLICATE_NAME, IssueKind.SELF_LOOP, IssueKind.UNKNOWN_RESOURCE,
            IssueKind.ZERO_MAX_LOAD, IssueKind.MISSING_CAPACITY} <= kinds


def test_strong_requirement_needs_positive_arity():
    with pytest.raises(ValueError):
        Requirement("p", 0, Mode.STRONG)
    assert Requirement("p", 0, "weak").arity == 0


def test_configuration_equality_ignores_binding_order():
    a = Configuration({"n": "t"}, {}, [("p", "x", "y"), ("q", "x", "z")])
    b = Configuration({"n": "t"}, {}, [("q", "x", "z"), ("p", "x", "y")])
    assert a == b and a.digest() == b.digest()


def _random_correct(seed):
    from microdeploy.synthesis import synthesize

    rng = random.Random(seed)
    u = random_universe(rng)
    if not validate_universe(u).ok:
        return None
    try:
        sol = synthesize(u, random_request(rng, u), random_budget(rng, u), time_budget=5)
    except Exception:
        return None
    return (u, sol.configuration, rng) if sol.configuration is not None else None


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_removing_bindings_never_creates_capacity_violations(seed):
    got = _random_correct(seed)
    if got is None:
        return
    u, config, rng = got
    keep = [b for b in config.bindings if rng.random() < 0.5]
    assert ViolationKind.CAPACITY_EXCEEDED not in check_correct(u, config.evolve(bindings=keep)).kinds()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_cost_invariant_under_instance_shuffle(seed):
    got = _random_correct(seed)
    if got is None:
        return
    u, config, rng = got
    nodes = list(config.nodes)
    moved = {i: (p.type, rng.choice(nodes)) for i, p in config.instances.items()} if nodes else {}
    assert total_cost(config.evolve(instances=moved), u) == total_cost(config, u)


def test_binding_tuple_fields():
    b = Binding("p", "r", "q")
    assert (b.port, b.requirer, b.provider) == ("p", "r", "q")
