"""Fixed-timestep simulation of the pipeline under a time-varying workload.

Messages are tracked as work items: a message forking into several
sub-pipelines becomes several items.  Queues hold run-length cohorts of
items sharing an enqueue-birth tick, which keeps FIFO order and per-item
latency exact without storing individual messages.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .model import Binding, Configuration, Placement, Universe, check_correct, total_cost
from .pipeline import (
    PipelineSpec,
    ScalePlan,
    backend_port,
    greedy_select,
    stage_capacity,
    supported_inbound,
)
from .plan import (
    CreateNode,
    Deploy,
    DeploymentPlan,
    PlanError,
    synthesize_plan,
    validate_plan,
)
from .synthesis import TargetRequest, ThroughputTarget, synthesize


class ConfigInvalid(Exception):
    pass


class LengthMismatch(Exception):
    pass


CSV_HEADER = ("tick", "inbound_rate", "mean_latency_ms", "cum_lost", "cost_rate", "cum_cost", "components")


@dataclass(frozen=True)
class WorkloadProfile:
    points: tuple     # ((tick, msg/s), ...)

    def __post_init__(self):
        pts = tuple((int(t), float(r)) for t, r in self.points)
        if not pts:
            raise ValueError("workload needs at least one point")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ValueError("workload ticks must be strictly increasing")
        if any(r < 0 for _, r in pts):
            raise ValueError("workload rates must be >= 0")
        object.__setattr__(self, "points", pts)

    def rate_at(self, tick) -> float:
        return float(np.interp(tick, [t for t, _ in self.points], [r for _, r in self.points]))

    def rates(self, duration: int) -> np.ndarray:
        ts, rs = zip(*self.points)
        return np.interp(np.arange(duration), ts, rs)

    @property
    def plateau_start(self) -> int:
        """First tick at which the profile reaches its maximum rate."""
        peak = max(r for _, r in self.points)
        return next(t for t, r in self.points if r == peak)

    @classmethod
    def constant(cls, rate: float) -> "WorkloadProfile":
        return cls(((0, rate),))


def default_workload(peak: float = 45_000, start: float = 2_000, ramp_ticks: int = 8_000) -> WorkloadProfile:
    """Fast ramp followed by a stable plateau."""
    return WorkloadProfile(((0, start), (ramp_ticks, peak)))


@dataclass(frozen=True)
class SimConfig:
    tick_ms: float = 1.0
    queue_size: int = 10_000
    node_delay: int = 5_000
    instance_delay: int = 1_000
    util_threshold: float = 0.9
    sustain_window: int = 200
    smoothing_window: int = 100
    duration: int = 40_000
    seed: int = 0

    def __post_init__(self):
        for name in ("tick_ms", "queue_size", "util_threshold", "sustain_window",
                     "smoothing_window", "duration"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.node_delay < 0 or self.instance_delay < 0:
            raise ValueError("deployment delays must be >= 0")


# -- service rates -------------------------------------------------------------

def effective_service_rate(universe: Universe, config: Configuration, instance: str,
                           resource: str = "cpu") -> float:
    """Messages per second an instance can serve given the cores it really gets.

    Instances on a node share its cores in proportion to their demands when
    the node is oversubscribed; spare cores are never handed out, so an
    instance never runs faster than its own allocation allows.
    """
    place = config.instances[instance]
    svc = universe.service(place.type)
    want = svc.consumption.get(resource, 0)
    if want <= 0:
        return float(svc.max_load)
    cores = universe.node_type(config.nodes[place.node]).capacity.get(resource, 0)
    demand = sum(universe.service(config.instances[i].type).consumption.get(resource, 0)
                 for i in config.instances_on(place.node))
    # cores actually available to this instance over the cores it asks for
    return float(svc.max_load) * min(1.0, cores / demand)


# -- controllers ---------------------------------------------------------------

class LocalController:
    """Replicates any watched type that stays above the utilization threshold."""

    name = "local"

    def __init__(self, watched: Sequence[str], threshold: float = 0.9, window: int = 200):
        self.watched = list(watched)
        self.threshold = threshold
        self.window = window
        self.streak = {t: 0 for t in self.watched}

    def step(self, utilization: Mapping[str, float], pending) -> list:
        out = []
        for t in self.watched:
            if utilization.get(t, 0.0) > self.threshold:
                self.streak[t] += 1
            else:
                self.streak[t] = 0
            if self.streak[t] >= self.window and t not in pending:
                out.append(t)
                self.streak[t] = 0
        return out


class GlobalController:
    """Greedy choice of scale plans against the smoothed inbound rate."""

    name = "global"

    def __init__(self, plans: Sequence[ScalePlan], window: int = 100):
        self.plans = list(plans)
        self.window = window
        self.samples = deque()
        self.total = 0.0

    def observe(self, rate: float) -> float:
        self.samples.append(rate)
        self.total += rate
        if len(self.samples) > self.window:
            self.total -= self.samples.popleft()
        return self.total / len(self.samples)

    def step(self, inbound: float, supported: float, busy: bool) -> list:
        smoothed = self.observe(inbound)
        if busy or smoothed <= supported:
            return []
        return greedy_select(supported, smoothed, self.plans)


def local_controller_step(controller: LocalController, utilization, pending=()) -> list:
    return controller.step(utilization, set(pending))


def global_controller_step(controller: GlobalController, inbound: float, supported: float,
                           busy: bool = False) -> list:
    return controller.step(inbound, supported, busy)


def _fresh(prefix, taken):
    k = 1
    while f"{prefix}-{k}" in taken:
        k += 1
    taken.add(f"{prefix}-{k}")
    return f"{prefix}-{k}"


def replica_target(universe: Universe, config: Configuration, type_name: str, taken: set) -> Configuration:
    """``config`` plus one ``type_name`` instance on a new node of the cheapest fitting type."""
    svc = universe.service(type_name)
    fitting = [n for n in universe.node_types
               if all(svc.consumption.get(r, 0) <= n.capacity.get(r, 0) for r in svc.consumption)]
    if not fitting:
        raise ConfigInvalid(f"no node type can host {type_name!r}")
    kind = min(fitting, key=lambda n: (n.cost, sum(n.capacity.values()), n.name))
    node = _fresh(kind.name, taken)
    inst = _fresh(type_name, taken)
    binds = list(config.bindings)
    for r in svc.requires:
        if r.arity == 0:
            continue
        cands = []
        for i, p in config.instances.items():
            prov = universe.service(p.type).provided(r.port)
            if prov is None:
                continue
            used = sum(1 for b in binds if b.provider == i and b.port == r.port)
            if prov.capacity is None or used < prov.capacity:
                cands.append((used, i))
        cands.sort()
        if len(cands) < r.arity:
            raise ConfigInvalid(f"not enough providers of {r.port!r} for a new {type_name!r}")
        binds += [Binding(r.port, inst, i) for _, i in cands[:r.arity]]
    instances = dict(config.instances)
    instances[inst] = Placement(type_name, node)
    return Configuration({**config.nodes, node: kind.name}, instances, binds)


# -- trace ---------------------------------------------------------------------

@dataclass
class SimulationTrace:
    inbound_rate: list = field(default_factory=list)
    mean_latency_ms: list = field(default_factory=list)    # None when nothing completed
    cum_lost: list = field(default_factory=list)
    cost_rate: list = field(default_factory=list)
    cum_cost: list = field(default_factory=list)
    components: list = field(default_factory=list)
    events: list = field(default_factory=list)             # (tick, kind, detail)
    totals: dict = field(default_factory=dict)
    controller: str = "none"
    seed: int = 0
    final: Optional[Configuration] = None

    def __len__(self):
        return len(self.inbound_rate)

    def rows(self):
        for t in range(len(self)):
            lat = self.mean_latency_ms[t]
            yield (t, _num(self.inbound_rate[t]), "" if lat is None else _num(lat),
                   self.cum_lost[t], _num(self.cost_rate[t]), _num(self.cum_cost[t]), self.components[t])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "SimulationTrace":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"unexpected trace header {header}")
        tr = cls()
        for k, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"line {k}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            tr.inbound_rate.append(float(row[1]))
            tr.mean_latency_ms.append(float(row[2]) if row[2] else None)
            tr.cum_lost.append(int(row[3]))
            tr.cost_rate.append(float(row[4]))
            tr.cum_cost.append(float(row[5]))
            tr.components.append(int(row[6]))
        return tr

    def first_events(self, kind: str) -> dict:
        """Type -> tick of its first event of ``kind``."""
        out = {}
        for tick, k, detail in self.events:
            if k == kind and detail not in out:
                out[detail] = tick
        return out


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


# -- the simulator -------------------------------------------------------------

class _Stage:
    __slots__ = ("name", "service", "balancer", "lbs", "rates", "frac", "weights", "carry",
                 "children", "certain", "probs", "prob_targets", "svc_cap", "lb_cap")


class _Sim:
    def __init__(self, universe, spec, initial, workload, controller, cfg, scale_plans):
        self.u = universe
        self.spec = spec
        self.cfg = cfg
        self.workload = workload
        self.controller = controller
        self.scale_plans = scale_plans
        self.rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.tick_s = cfg.tick_ms / 1000.0
        self.config = initial
        self.queues = {}     # balancer instance -> deque of [birth, count]
        self.qlen = {}
        self.frac = {}
        self.order = spec.topological_order()
        self.index = {n: k for k, n in enumerate(self.order)}
        self.inflight = [[] for _ in self.order]
        self.pending = {}    # key -> (due tick, actions, kind)
        self.taken = set(initial.nodes) | set(initial.instances)
        self.trace = SimulationTrace(controller=getattr(controller, "name", "none"), seed=cfg.seed)
        self.stats = dict(arrivals=0, spawned=0, completed=0, lost=0)
        self.lat_sum = 0
        self.lat_n = 0
        self.cost_acc = 0.0
        self.global_cache = {}
        self._rebuild()

    # configuration-derived structures
    def _rebuild(self):
        u, cfg = self.u, self.config
        rate = {i: effective_service_rate(u, cfg, i) * self.tick_s for i in cfg.instances}
        self.stages = []
        for name in self.order:
            st = _Stage()
            spec_stage = self.spec.stage(name)
            st.name, st.service, st.balancer = name, spec_stage.service, spec_stage.balancer
            st.lbs = sorted(cfg.instances_of(st.balancer))
            port = backend_port(name)
            per_lb = {lb: 0.0 for lb in st.lbs}
            bound = set()
            for b in cfg.bindings:
                if b.port == port and b.provider in per_lb and cfg.instances[b.requirer].type == st.service:
                    if b.requirer not in bound:
                        per_lb[b.provider] += rate[b.requirer]
                        bound.add(b.requirer)
            st.rates = [min(rate[lb], per_lb[lb]) for lb in st.lbs]
            total = sum(st.rates)
            st.weights = [r / total for r in st.rates] if total > 0 else [1.0 / len(st.lbs)] * len(st.lbs)
            st.carry = [0.0] * len(st.lbs)
            st.svc_cap = sum(rate[i] for i in bound)
            st.lb_cap = sum(rate[lb] for lb in st.lbs)
            succ = self.spec.successors(name)
            st.children = [self.index[d] for d, p in succ if float(p) >= 1.0]
            st.prob_targets = [self.index[d] for d, p in succ if 0 < float(p) < 1.0]
            st.probs = np.array([float(p) for d, p in succ if 0 < float(p) < 1.0])
            st.certain = bool(st.children)
            for lb in st.lbs:
                if lb not in self.queues:
                    self.queues[lb] = deque()
                    self.qlen[lb] = 0
                    self.frac[lb] = 0.0
            self.stages.append(st)
        self.cost_rate = float(total_cost(cfg, u))
        self.components = len(cfg.instances)
        self.supported = supported_inbound(cfg, self.spec, u)

    # queueing
    def _enqueue(self, lb, birth, n):
        space = self.cfg.queue_size - self.qlen[lb]
        take = n if n <= space else max(space, 0)
        self.stats["lost"] += n - take
        if take:
            q = self.queues[lb]
            if q and q[-1][0] == birth:
                q[-1][1] += take
            else:
                q.append([birth, take])
            self.qlen[lb] += take

    def _arrive(self, k, birth, n):
        st = self.stages[k]
        if len(st.lbs) == 1:
            self._enqueue(st.lbs[0], birth, n)
            return
        # proportional split, remainders carried so long-run shares are exact
        give = []
        for j, w in enumerate(st.weights):
            st.carry[j] += n * w
            give.append(int(st.carry[j]))
        left = n - sum(give)
        if left > 0:
            ranked = sorted(range(len(give)), key=lambda j: (give[j] - st.carry[j], j))
            for j in ranked[:left]:
                give[j] += 1
        for j, g in enumerate(give):
            st.carry[j] -= g
            if g:
                self._enqueue(st.lbs[j], birth, g)

    def _deliver(self, t):
        rng = self.rng
        for k, st in enumerate(self.stages):
            cohorts = self.inflight[k]
            if not cohorts:
                continue
            self.inflight[k] = []
            n_prob = len(st.prob_targets)
            if n_prob:
                total = sum(n for _, n in cohorts)
                hits = rng.random((total, n_prob)) < st.probs
            row = 0
            for birth, n in cohorts:
                out = 0
                for c in st.children:
                    self._arrive(c, birth, n)
                    out += n
                ended = 0 if st.certain else n
                if n_prob:
                    block = hits[row:row + n]
                    row += n
                    per_edge = block.sum(axis=0)
                    for c, m in zip(st.prob_targets, per_edge.tolist()):
                        if m:
                            self._arrive(c, birth, m)
                            out += m
                    if not st.certain:
                        ended = n - int(block.any(axis=1).sum())
                elif not st.children:
                    ended = n
                self.stats["spawned"] += out - (n - ended)
                if ended:
                    self.stats["completed"] += ended
                    self.lat_sum += ended * (t - birth)
                    self.lat_n += ended

    def _dispatch(self):
        util = {}
        for k, st in enumerate(self.stages):
            done = 0
            out = self.inflight[k]
            for lb, r in zip(st.lbs, st.rates):
                avail = self.frac[lb] + r
                whole = int(avail)
                self.frac[lb] = avail - whole
                want = min(whole, self.qlen[lb])
                if want <= 0:
                    continue
                q = self.queues[lb]
                left = want
                while left:
                    head = q[0]
                    if head[1] <= left:
                        q.popleft()
                        out.append((head[0], head[1]))
                        left -= head[1]
                    else:
                        head[1] -= left
                        out.append((head[0], left))
                        left = 0
                self.qlen[lb] -= want
                done += want
            util[st.service] = done / st.svc_cap if st.svc_cap > 0 else (1.0 if done else 0.0)
            util[st.balancer] = done / st.lb_cap if st.lb_cap > 0 else 0.0
        return util

    # reconfiguration
    def _schedule(self, t, key, actions, kind, detail):
        has_node = any(isinstance(a, CreateNode) for a in actions)
        has_inst = any(isinstance(a, Deploy) for a in actions)
        due = t + (self.cfg.node_delay if has_node else 0) + (self.cfg.instance_delay if has_inst else 0)
        self.pending[key] = (due, tuple(actions), kind, detail)
        self.trace.events.append((t, f"{kind}-request", detail))

    def _apply_due(self, t):
        due = sorted((v[0], k) for k, v in self.pending.items() if v[0] <= t)
        if not due:
            return
        for _, key in due:
            _, actions, kind, detail = self.pending.pop(key)
            try:
                self.config = validate_plan(self.config, DeploymentPlan(actions), self.u)
                self.trace.events.append((t, f"{kind}-done", detail))
            except PlanError as exc:
                self.trace.events.append((t, f"{kind}-failed", f"{detail}: {exc}"))
        self._rebuild()

    def _local(self, t, util):
        busy = {k[1] for k in self.pending if k[0] == "local"}
        for type_name in self.controller.step(util, busy):
            try:
                target = replica_target(self.u, self.config, type_name, self.taken)
                plan = synthesize_plan(self.config, target, self.u)
            except (ConfigInvalid, PlanError) as exc:
                self.trace.events.append((t, "replicate-failed", f"{type_name}: {exc}"))
                continue
            self._schedule(t, ("local", type_name), plan.actions, "replicate", type_name)

    def _global(self, t, inbound):
        chosen = self.controller.step(inbound, self.supported, bool(self.pending))
        if not chosen:
            return
        names = "+".join(p.name for p in chosen)
        rate = self.supported + sum(p.delta_capacity for p in chosen)
        key = (self.config.digest(), rate)
        if key not in self.global_cache:
            sol = synthesize(self.u, TargetRequest({}, ThroughputTarget(rate, self.spec)),
                             existing=self.config, time_budget=30.0)
            self.global_cache[key] = sol.configuration
        target = self.global_cache[key]
        if target is None:
            self.trace.events.append((t, "scale-infeasible", names))
            return
        plan = synthesize_plan(self.config, target, self.u)
        self._schedule(t, ("global",), plan.actions, "scale", names)

    def run(self):
        cfg = self.cfg
        rates = self.workload.rates(cfg.duration)
        # whole arrivals per tick with the fractional remainder carried over
        cum = np.floor(np.cumsum(rates * self.tick_s) + 1e-9).astype(np.int64)
        arrivals = np.diff(np.concatenate(([0], cum))).tolist()
        tr = self.trace
        for t in range(cfg.duration):
            if self.pending:
                self._apply_due(t)
            self._deliver(t)
            n = arrivals[t]
            if n:
                self.stats["arrivals"] += n
                self._arrive(0, t, n)
            util = self._dispatch()
            if isinstance(self.controller, LocalController):
                self._local(t, util)
            elif isinstance(self.controller, GlobalController):
                self._global(t, float(rates[t]))
            self.cost_acc += self.cost_rate
            tr.inbound_rate.append(float(rates[t]))
            tr.mean_latency_ms.append(self.lat_sum * cfg.tick_ms / self.lat_n if self.lat_n else None)
            self.lat_sum = self.lat_n = 0
            tr.cum_lost.append(self.stats["lost"])
            tr.cost_rate.append(self.cost_rate)
            tr.cum_cost.append(self.cost_acc)
            tr.components.append(self.components)
        queued = sum(self.qlen.values())
        in_service = sum(n for c in self.inflight for _, n in c)
        tr.totals = dict(self.stats, queued=queued, in_service=in_service,
                         generated=self.stats["arrivals"] + self.stats["spawned"])
        tr.final = self.config
        return tr


def run(universe: Universe, spec: PipelineSpec, initial: Configuration, workload: WorkloadProfile,
        controller=None, sim_config: SimConfig = SimConfig(),
        scale_plans: Optional[Sequence[ScalePlan]] = None) -> SimulationTrace:
    """Simulate ``initial`` under ``workload``.

    ``controller`` is None, ``"local"``, ``"global"`` or a controller object;
    the global controller needs ``scale_plans``.
    """
    report = check_correct(universe, initial)
    if not report.ok:
        raise ConfigInvalid(f"initial configuration is not correct: {report.violations[0].message}")
    try:
        stage_capacity(initial, spec, universe)
    except Exception as exc:
        raise ConfigInvalid(str(exc)) from None
    if controller == "local":
        controller = LocalController([s.service for s in spec.stages],
                                     sim_config.util_threshold, sim_config.sustain_window)
    elif controller == "global":
        if scale_plans is None:
            raise ValueError("the global controller needs scale plans")
        controller = GlobalController(scale_plans, sim_config.smoothing_window)
    elif controller in ("none", None):
        controller = None
    return _Sim(universe, spec, initial, workload, controller, sim_config, scale_plans).run()


# -- comparison ----------------------------------------------------------------

METRICS = ("cumulative_loss", "mean_latency_ms", "cumulative_cost", "peak_components")


@dataclass
class ComparisonReport:
    local: dict
    global_: dict
    winners: dict      # metric -> "local" | "global" | "tie"
    plateau_start: int

    def to_dict(self) -> dict:
        return {"plateau_start": self.plateau_start, "local": self.local,
                "global": self.global_, "winners": self.winners}

    def table(self) -> str:
        lines = [f"{'metric':<18}{'local':>16}{'global':>16}  winner"]
        for m in METRICS:
            lines.append(f"{m:<18}{_fmt(self.local[m]):>16}{_fmt(self.global_[m]):>16}  {self.winners[m]}")
        return "\n".join(lines)


def _fmt(x):
    if x is None:
        return "-"
    return f"{x:.3f}" if isinstance(x, float) else str(x)


def _summary(trace: SimulationTrace, start: int) -> dict:
    lats = [x for x in trace.mean_latency_ms[start:] if x is not None]
    return {
        "cumulative_loss": trace.cum_lost[-1] if len(trace) else 0,
        "mean_latency_ms": sum(lats) / len(lats) if lats else None,
        "cumulative_cost": trace.cum_cost[-1] if len(trace) else 0.0,
        "peak_components": max(trace.components) if len(trace) else 0,
    }


def compare(trace_local: SimulationTrace, trace_global: SimulationTrace) -> ComparisonReport:
    """Loss, post-plateau latency, cost and peak size of two runs of one workload.

    The plateau starts at the first tick where the inbound rate hits its
    maximum.  Lower is better for the first three metrics; for peak component
    count the report just states which run deployed more.
    """
    if len(trace_local) != len(trace_global):
        raise LengthMismatch(f"traces have {len(trace_local)} and {len(trace_global)} ticks")
    if trace_local.inbound_rate != trace_global.inbound_rate:
        raise LengthMismatch("traces were produced by different workloads")
    rates = trace_local.inbound_rate
    start = rates.index(max(rates)) if rates else 0
    a, b = _summary(trace_local, start), _summary(trace_global, start)
    winners = {}
    for m in METRICS:
        x, y = a[m], b[m]
        if x == y or x is None or y is None:
            winners[m] = "tie"
        elif m == "peak_components":
            winners[m] = "local" if x > y else "global"
        else:
            winners[m] = "local" if x < y else "global"
    return ComparisonReport(a, b, winners, start)


def domino_order(trace: SimulationTrace, universe: Universe, spec: PipelineSpec,
                 initial: Configuration) -> list:
    """Check that replications ripple downstream one bottleneck at a time.

    For every routing edge P -> S where the initial configuration makes P the
    tighter stage, S may only ask for its first replica after P's first
    replica went live.  Returns (P, S, P done tick, S request tick, ok) for
    each such edge on which S replicated at all.
    """
    caps = stage_capacity(initial, spec, universe)
    requested = trace.first_events("replicate-request")
    done = trace.first_events("replicate-done")
    out = []
    for src, dst, _ in spec.routes:
        if not caps[src] < caps[dst]:
            continue
        s_type, d_type = spec.stage(src).service, spec.stage(dst).service
        if d_type not in requested:
            continue
        p_done = done.get(s_type)
        ok = p_done is not None and requested[d_type] >= p_done
        out.append((src, dst, p_done, requested[d_type], ok))
    return out
