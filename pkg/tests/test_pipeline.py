import math
from fractions import Fraction

import pytest

from microdeploy.model import MicroserviceType, NodeType, ResourceKind, Universe, check_correct
from microdeploy.pipeline import (
    MissingStage,
    PipelineError,
    PipelineSpec,
    ScalePlan,
    Stage,
    builtin_email_pipeline,
    builtin_scale_plans,
    greedy_select,
    supported_inbound,
)


@pytest.fixture(scope="module")
def case():
    return builtin_email_pipeline()


@pytest.fixture(scope="module")
def plans(case):
    return builtin_scale_plans(*case)


def fake_plans():
    return [ScalePlan("Scale 1", 20_000), ScalePlan("Scale 2", 50_000), ScalePlan("Scale 3", 80_000)]


def names(seq):
    return [p.name for p in seq]


def test_builtin_structure(case):
    universe, spec, base = case
    services = [s.service for s in spec.stages]
    assert len(services) == 12 and len({s.balancer for s in spec.stages}) == 12
    assert universe.service("HeaderAnalyser").max_load == 40_000
    assert supported_inbound(base, spec, universe) == 10_000
    assert all(c == 1 for c in base.counts().values()) and len(base.counts()) == 24
    assert check_correct(universe, base).ok
    assert spec.entry == "MessageReceiver"


def test_doubling_doubles_supported(case):
    universe, spec, base = case
    from microdeploy.synthesis import TargetRequest, synthesize

    doubled = synthesize(universe, TargetRequest({t: 2 for t in base.counts()})).configuration
    assert supported_inbound(doubled, spec, universe) == 20_000


def test_visit_probability_scales_capacity():
    u = Universe((ResourceKind("cpu"),),
                 [MicroserviceType(n, consumption={"cpu": 1}, max_load=m)
                  for n, m in [("A", 10**9), ("ALB", 10**9), ("B", 40_000), ("BLB", 10**9)]],
                 [NodeType("n", 1, {"cpu": 8})])
    spec = PipelineSpec([Stage("A", "A", "ALB"), Stage("B", "B", "BLB")], [("A", "B", 0.5)], "A")
    from microdeploy.model import Configuration

    config = Configuration({"x": "n"}, {t: (t, "x") for t in ("A", "ALB", "B", "BLB")})
    assert supported_inbound(config, spec, u) == 80_000
    assert spec.visits()["B"] == Fraction(1, 2)


def test_missing_stage(case):
    universe, spec, base = case
    keep = {i: p for i, p in base.instances.items() if p.type != "SentimentAnalyser"}
    with pytest.raises(MissingStage):
        supported_inbound(base.evolve(instances=keep, bindings=[]), spec, universe)


def test_pipeline_rejects_cycles_and_bad_probabilities():
    st = [Stage("A", "A", "ALB"), Stage("B", "B", "BLB")]
    with pytest.raises(PipelineError):
        PipelineSpec(st, [("A", "B", 1), ("B", "A", 1)], "A")
    with pytest.raises(PipelineError):
        PipelineSpec(st, [("A", "B", 1.5)], "A")
    with pytest.raises(PipelineError):
        PipelineSpec(st, [], "C")


def test_scale_plans(case, plans):
    universe, spec, base = case
    assert [(p.name, p.delta_capacity) for p in plans] == [("Scale 1", 20_000), ("Scale 2", 50_000),
                                                           ("Scale 3", 80_000)]
    for p in plans:
        assert check_correct(universe, p.target).ok
        assert supported_inbound(p.target, spec, universe) >= 10_000 + p.delta_capacity
        for i, place in base.instances.items():
            assert p.target.instances[i] == place
    assert plans[2].added_instances >= 30


def test_greedy_examples():
    ps = fake_plans()
    assert greedy_select(10_000, 10_000, ps) == []
    assert names(greedy_select(10_000, 30_000, ps)) == ["Scale 1"]
    assert names(greedy_select(10_000, 60_000, ps)) == ["Scale 2"]
    assert names(greedy_select(10_000, 100_000, ps)) == ["Scale 3", "Scale 1"]


def test_greedy_tie_prefers_smaller_delta():
    ps = [ScalePlan("big", 30), ScalePlan("small", 10)]
    # from 0 to 20: both land 10 away
    assert names(greedy_select(0, 20, ps)) == ["small", "small"]


def test_greedy_reaches_target_without_gross_overshoot():
    ps = fake_plans()
    for cur in range(0, 100_001, 7_500):
        for target in range(0, 400_001, 13_000):
            picked = greedy_select(cur, target, ps)
            total = sum(p.delta_capacity for p in picked)
            assert cur + total >= target
            if picked:
                assert total < target - cur + 80_000


def test_greedy_rejects_bad_plans():
    with pytest.raises(ValueError):
        greedy_select(0, 10, [])


def test_supported_monotone(case):
    universe, spec, base = case
    from microdeploy.synthesis import TargetRequest, synthesize

    prev = supported_inbound(base, spec, universe)
    config = base
    for t in ("MessageParser", "MessageParserLB", "LinkAnalyser"):
        config = synthesize(universe, TargetRequest({**config.counts(), t: config.counts()[t] + 1}),
                            existing=config).configuration
        now = supported_inbound(config, spec, universe)
        assert now >= prev and not math.isnan(now)
        prev = now
