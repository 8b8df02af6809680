"""Scenario description, JSON (de)serialization, validation and the built-in paper-poc run."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .aggregator import BufferConfig, Overflow
from .bam import BandwidthConstraints, Model, proportional_bc
from .model import Issue, Link, Node, Route, Topic, Topology, ValidationError, shared_prefix, topology_issues, walk_route
from .orchestrator import OrchestratorConfig, RecomputePolicy

EVENT_KINDS = ("start_hosts", "subscribe", "unsubscribe", "orchestrator_down", "orchestrator_up", "end")
SOURCE_PROFILES = ("cbr", "jitter")
CROSS_PROFILES = ("cbr", "onoff")
PAPER_POC_FILE = Path(__file__).with_name("scenarios") / "paper-poc.json"


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorSpec:
    id: str
    topics: tuple[Topic, ...]
    buffer: BufferConfig
    fallback_rates: Optional[tuple[int, int, int]] = None


@dataclass(frozen=True)
class CrossTraffic:
    id: str
    src: str
    dst: str
    rate: int
    route: tuple[str, ...]
    profile: str = "cbr"
    on_ticks: int = 0
    off_ticks: int = 0

    def load(self, tick: int) -> int:
        if self.profile == "onoff":
            period = self.on_ticks + self.off_ticks
            return self.rate if tick % period < self.on_ticks else 0
        return self.rate


@dataclass(frozen=True)
class ScenarioEvent:
    at: int
    kind: str
    consumer: Optional[str] = None
    aggregator: Optional[str] = None
    topic: Optional[str] = None
    qos: Optional[int] = None
    label: Optional[str] = None


@dataclass(frozen=True)
class SimConfig:
    tick_duration: float = 0.1
    seed: int = 0
    metadata_interval: int = 10
    rate_window: int = 10


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: Topology
    bam: dict[str, BandwidthConstraints]
    aggregators: tuple[AggregatorSpec, ...]
    consumers: tuple[str, ...]
    orchestrator: OrchestratorConfig
    cross_traffic: tuple[CrossTraffic, ...] = ()
    events: tuple[ScenarioEvent, ...] = ()
    sim: SimConfig = field(default_factory=SimConfig)

    @property
    def end_tick(self) -> int:
        return max(e.at for e in self.events if e.kind == "end")

    def aggregator(self, agg_id: str) -> AggregatorSpec:
        return next(a for a in self.aggregators if a.id == agg_id)

    def channel_path(self, agg_id: str) -> tuple[str, ...]:
        """Backbone segment shared by the aggregator's routes to every consumer."""
        return shared_prefix(self.topology.route(agg_id, c) for c in self.consumers)


# -- serialization -------------------------------------------------------------


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def scenario_to_dict(s: Scenario) -> dict:
    t = s.topology
    return {
        "name": s.name,
        "sim": {
            "tick_duration": s.sim.tick_duration,
            "seed": s.sim.seed,
            "metadata_interval": s.sim.metadata_interval,
            "rate_window": s.sim.rate_window,
        },
        "topology": {
            "nodes": [{"id": n.id, "kind": n.kind} for n in t.nodes],
            "links": [{"id": l.id, "a": l.a, "b": l.b, "capacity": l.capacity} for l in t.links],
            "routes": [{"src": r.src, "dst": r.dst, "links": list(r.links)} for r in t.routes],
        },
        "bam": {
            lid: {"model": bc.model.value, "bc": list(bc.bc), "devolution": bc.devolution}
            for lid, bc in s.bam.items()
        },
        "aggregators": [
            {
                "id": a.id,
                "topics": [
                    {"name": tp.name, "rate": tp.gen_rate, "msg_size": tp.msg_size, "phase": tp.phase, "jitter": tp.jitter}
                    for tp in a.topics
                ],
                "buffer": {
                    "capacity": a.buffer.capacity_per_class,
                    "overflow": a.buffer.overflow.value,
                    "per_class": list(a.buffer.per_class) if a.buffer.per_class is not None else None,
                },
                "fallback_rates": list(a.fallback_rates) if a.fallback_rates is not None else None,
            }
            for a in s.aggregators
        ],
        "consumers": list(s.consumers),
        "orchestrator": {
            "total_budget": s.orchestrator.total_budget,
            "class_split": list(s.orchestrator.class_split),
            "buffer_threshold": s.orchestrator.buffer_threshold,
            "recompute_policy": {
                "mode": s.orchestrator.recompute_policy.mode,
                "ticks": s.orchestrator.recompute_policy.ticks,
            },
        },
        "cross_traffic": [
            {
                "id": x.id, "src": x.src, "dst": x.dst, "rate": x.rate, "route": list(x.route),
                "profile": x.profile, "on_ticks": x.on_ticks, "off_ticks": x.off_ticks,
            }
            for x in s.cross_traffic
        ],
        "events": [
            _drop_none({
                "at": e.at, "kind": e.kind, "consumer": e.consumer, "aggregator": e.aggregator,
                "topic": e.topic, "qos": e.qos, "label": e.label,
            })
            for e in s.events
        ],
    }


def dumps(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=2) + "\n"


class _Reader:
    """Pulls typed fields out of nested JSON, collecting every problem with its location."""

    def __init__(self):
        self.issues: list[Issue] = []

    def bad(self, where: str, msg: str, code: str = "InvalidField") -> None:
        self.issues.append(Issue(code, msg, where))

    def get(self, d: Any, key: str, where: str, kind, default=..., check=None):
        loc = f"{where}.{key}" if where else key
        if not isinstance(d, dict):
            self.bad(where, "expected an object")
            return None if default is ... else default
        if key not in d or d[key] is None:
            if default is ...:
                self.bad(loc, "missing required field", "MissingField")
                return None
            return default
        v = d[key]
        ok = isinstance(v, kind) and not (kind in (int, (int, float)) and isinstance(v, bool))
        if not ok:
            self.bad(loc, f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
            return None if default is ... else default
        if check is not None:
            msg = check(v)
            if msg:
                self.bad(loc, msg)
        return v


def _positive(v):
    return None if v > 0 else f"must be > 0, got {v}"


def _nonneg(v):
    return None if v >= 0 else f"must be >= 0, got {v}"


def _three_ints(v):
    if len(v) != 3 or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in v):
        return "expected 3 nonnegative integers"
    return None


NUM = (int, float)


def scenario_from_dict(d: dict) -> Scenario:
    """Build a Scenario; raises ValidationError listing every structural and semantic problem."""
    r = _Reader()
    if not isinstance(d, dict):
        raise ValidationError([Issue("InvalidField", "scenario must be a JSON object", "")])
    name = r.get(d, "name", "", str, "scenario")

    sd = r.get(d, "sim", "", dict, {})
    sim = SimConfig(
        tick_duration=r.get(sd, "tick_duration", "sim", NUM, 0.1, _positive),
        seed=r.get(sd, "seed", "sim", int, 0),
        metadata_interval=r.get(sd, "metadata_interval", "sim", int, 10, _positive),
        rate_window=r.get(sd, "rate_window", "sim", int, 10, _positive),
    )

    td = r.get(d, "topology", "", dict, {})
    nodes, links, routes = [], [], []
    for i, n in enumerate(r.get(td, "nodes", "topology", list, [])):
        loc = f"topology.nodes[{i}]"
        nodes.append(Node(r.get(n, "id", loc, str), r.get(n, "kind", loc, str)))
    for i, l in enumerate(r.get(td, "links", "topology", list, [])):
        loc = f"topology.links[{i}]"
        links.append(Link(r.get(l, "id", loc, str), r.get(l, "a", loc, str), r.get(l, "b", loc, str),
                          r.get(l, "capacity", loc, int)))
    for i, rt in enumerate(r.get(td, "routes", "topology", list, [])):
        loc = f"topology.routes[{i}]"
        routes.append(Route(r.get(rt, "src", loc, str), r.get(rt, "dst", loc, str),
                            tuple(r.get(rt, "links", loc, list, []))))
    topology = Topology(tuple(nodes), tuple(links), tuple(routes))

    bam_cfg = {}
    for lid, b in r.get(d, "bam", "", dict, {}).items():
        loc = f"bam.{lid}"
        model = r.get(b, "model", loc, str)
        bc = r.get(b, "bc", loc, list, None, _three_ints)
        dev = r.get(b, "devolution", loc, bool, False)
        if model not in {m.value for m in Model}:
            r.bad(f"{loc}.model", f"unknown model {model!r}")
            continue
        if bc is None or _three_ints(bc):
            continue
        bam_cfg[lid] = BandwidthConstraints(Model(model), tuple(bc), dev)

    aggs = []
    for i, a in enumerate(r.get(d, "aggregators", "", list, [])):
        loc = f"aggregators[{i}]"
        aid = r.get(a, "id", loc, str)
        topics = []
        for j, tp in enumerate(r.get(a, "topics", loc, list, [])):
            tl = f"{loc}.topics[{j}]"
            topics.append(Topic(
                name=r.get(tp, "name", tl, str),
                aggregator_id=aid,
                gen_rate=r.get(tp, "rate", tl, int, None, _nonneg),
                msg_size=r.get(tp, "msg_size", tl, int, None, _positive),
                phase=float(r.get(tp, "phase", tl, NUM, 0.0, lambda v: None if 0 <= v < 1 else "must lie in [0, 1)")),
                jitter=float(r.get(tp, "jitter", tl, NUM, 0.0, lambda v: None if 0 <= v < 1 else "must lie in [0, 1)")),
            ))
        bd = r.get(a, "buffer", loc, dict, {})
        overflow = r.get(bd, "overflow", f"{loc}.buffer", str, "drop_oldest")
        if overflow not in {o.value for o in Overflow}:
            r.bad(f"{loc}.buffer.overflow", f"unknown overflow policy {overflow!r}")
            overflow = "drop_oldest"
        per_class = r.get(bd, "per_class", f"{loc}.buffer", list, None, _three_ints)
        if per_class is not None and _three_ints(per_class):
            per_class = None
        if per_class is not None and any(c <= 0 for c in per_class):
            r.bad(f"{loc}.buffer.per_class", "capacities must be > 0")
        buffer = BufferConfig(
            r.get(bd, "capacity", f"{loc}.buffer", int, 1_000_000, _positive) or 1,
            Overflow(overflow),
            tuple(per_class) if per_class is not None else None,
        )
        fb = r.get(a, "fallback_rates", loc, list, None, _three_ints)
        fb = tuple(fb) if fb is not None and not _three_ints(fb) else None
        aggs.append(AggregatorSpec(aid, tuple(topics), buffer, fb))

    consumers = []
    for i, c in enumerate(r.get(d, "consumers", "", list, [])):
        if not isinstance(c, str):
            r.bad(f"consumers[{i}]", "expected a consumer id string")
        else:
            consumers.append(c)

    od = r.get(d, "orchestrator", "", dict, {})
    pd = r.get(od, "recompute_policy", "orchestrator", dict, {})
    split = r.get(od, "class_split", "orchestrator", list, [0.25, 0.35, 0.45])
    if not all(isinstance(x, NUM) and not isinstance(x, bool) for x in split):
        r.bad("orchestrator.class_split", "expected numbers")
        split = [0.25, 0.35, 0.45]
    orch = OrchestratorConfig(
        total_budget=r.get(od, "total_budget", "orchestrator", int),
        class_split=tuple(split),
        buffer_threshold=r.get(od, "buffer_threshold", "orchestrator", NUM, 0.5),
        recompute_policy=RecomputePolicy(
            r.get(pd, "mode", "orchestrator.recompute_policy", str, "on_every_metadata"),
            r.get(pd, "ticks", "orchestrator.recompute_policy", int, 0),
        ),
    )

    cross = []
    for i, x in enumerate(r.get(d, "cross_traffic", "", list, [])):
        loc = f"cross_traffic[{i}]"
        cross.append(CrossTraffic(
            id=r.get(x, "id", loc, str),
            src=r.get(x, "src", loc, str),
            dst=r.get(x, "dst", loc, str),
            rate=r.get(x, "rate", loc, int, None, _nonneg),
            route=tuple(r.get(x, "route", loc, list, [])),
            profile=r.get(x, "profile", loc, str, "cbr"),
            on_ticks=r.get(x, "on_ticks", loc, int, 0, _nonneg),
            off_ticks=r.get(x, "off_ticks", loc, int, 0, _nonneg),
        ))

    events = []
    for i, e in enumerate(r.get(d, "events", "", list, [])):
        loc = f"events[{i}]"
        events.append(ScenarioEvent(
            at=r.get(e, "at", loc, int, None, _nonneg),
            kind=r.get(e, "kind", loc, str),
            consumer=r.get(e, "consumer", loc, str, None),
            aggregator=r.get(e, "aggregator", loc, str, None),
            topic=r.get(e, "topic", loc, str, None),
            qos=r.get(e, "qos", loc, int, None),
            label=r.get(e, "label", loc, str, None),
        ))

    if r.issues:
        raise ValidationError(r.issues)
    s = Scenario(name, topology, bam_cfg, tuple(aggs), tuple(consumers), orch, tuple(cross), tuple(events), sim)
    validate_scenario(s)
    return s


def scenario_issues(s: Scenario) -> list[Issue]:
    issues = topology_issues(s.topology)
    t = s.topology
    kinds = {n.id: n.kind for n in t.nodes}

    for lid in sorted(s.bam):
        if lid not in t.link_map:
            issues.append(Issue("DanglingLink", f"BAM config for unknown link {lid!r}", f"bam.{lid}"))
    for l in t.links:
        bc = s.bam.get(l.id)
        if bc is None:
            issues.append(Issue("MissingBamConfig", f"no BAM config for link {l.id!r}", "bam"))
        elif l.capacity > 0:
            for p in bc.problems(l.capacity):
                issues.append(Issue("InvalidBamConfig", p, f"bam.{l.id}"))

    agg_ids = set()
    for i, a in enumerate(s.aggregators):
        loc = f"aggregators[{i}]"
        if a.id in agg_ids:
            issues.append(Issue("DuplicateId", f"aggregator {a.id!r} declared twice", loc))
        agg_ids.add(a.id)
        if kinds.get(a.id) != "aggregator":
            issues.append(Issue("UnknownNode", f"{a.id!r} is not an aggregator node", loc))
        names = set()
        for j, tp in enumerate(a.topics):
            if tp.name in names:
                issues.append(Issue("DuplicateId", f"topic {tp.name!r} declared twice on {a.id}", f"{loc}.topics[{j}]"))
            names.add(tp.name)
        for p in a.buffer.problems():
            issues.append(Issue("InvalidField", p, f"{loc}.buffer"))
    for a in t.nodes_of("aggregator"):
        if a not in agg_ids:
            issues.append(Issue("MissingField", f"aggregator node {a!r} has no aggregator section", "aggregators"))

    for i, c in enumerate(s.consumers):
        if kinds.get(c) != "consumer":
            issues.append(Issue("UnknownNode", f"{c!r} is not a consumer node", f"consumers[{i}]"))
    if not s.consumers:
        issues.append(Issue("MissingField", "at least one consumer is required", "consumers"))
    for c in t.nodes_of("consumer"):
        if c not in s.consumers:
            issues.append(Issue("MissingField", f"consumer node {c!r} not listed", "consumers"))

    if not any(i.code in ("MissingRoute", "DanglingLink", "BrokenRoute") for i in issues):
        for a in sorted(agg_ids & set(t.nodes_of("aggregator"))):
            if s.consumers and not s.channel_path(a):
                issues.append(Issue("NoSharedPath", f"routes from {a} to the consumers share no link", "topology.routes"))

    for fname, msg in s.orchestrator.problems().items():
        issues.append(Issue("InvalidField", msg, f"orchestrator.{fname}"))

    for i, x in enumerate(s.cross_traffic):
        loc = f"cross_traffic[{i}]"
        if x.profile not in CROSS_PROFILES:
            issues.append(Issue("InvalidField", f"unknown profile {x.profile!r}", f"{loc}.profile"))
        elif x.profile == "onoff" and x.on_ticks + x.off_ticks <= 0:
            issues.append(Issue("InvalidField", "onoff profile needs on_ticks + off_ticks > 0", loc))
        bad = [lid for lid in x.route if lid not in t.link_map]
        for lid in bad:
            issues.append(Issue("DanglingLink", f"cross traffic {x.id} names unknown link {lid!r}", f"{loc}.route"))
        if not bad and (not x.route or walk_route(t, x.src, x.route) != x.dst):
            issues.append(Issue("BrokenRoute", f"route does not connect {x.src} to {x.dst}", f"{loc}.route"))

    topics = {(a.id, tp.name) for a in s.aggregators for tp in a.topics}
    ends = [i for i, e in enumerate(s.events) if e.kind == "end"]
    if len(ends) != 1:
        issues.append(Issue("InvalidField", f"exactly one end event required, found {len(ends)}", "events"))
    else:
        end_at = s.events[ends[0]].at
        for i, e in enumerate(s.events):
            if i != ends[0] and e.at >= end_at:
                issues.append(Issue("InvalidField", "events must happen before the end event", f"events[{i}]"))
    for i, e in enumerate(s.events):
        loc = f"events[{i}]"
        if e.kind not in EVENT_KINDS:
            issues.append(Issue("InvalidField", f"unknown event kind {e.kind!r}", f"{loc}.kind"))
        if e.kind in ("subscribe", "unsubscribe"):
            if e.consumer not in s.consumers:
                issues.append(Issue("UnknownNode", f"unknown consumer {e.consumer!r}", f"{loc}.consumer"))
            if (e.aggregator, e.topic) not in topics:
                issues.append(Issue("UnknownTopic", f"{e.aggregator}/{e.topic}", f"{loc}.topic"))
        if e.kind == "subscribe" and e.qos not in (0, 1, 2):
            issues.append(Issue("InvalidField", f"qos must be 0, 1 or 2, got {e.qos}", f"{loc}.qos"))
    return issues


def validate_scenario(s: Scenario) -> Scenario:
    issues = scenario_issues(s)
    if issues:
        raise ValidationError(issues)
    return s


def loads(text: str) -> Scenario:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"line {e.lineno} column {e.colno}: {e.msg}") from None
    return scenario_from_dict(d)


def parse_scenario(path) -> Scenario:
    """Read and fully validate a scenario JSON file (a run manifest is accepted too)."""
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if isinstance(d, dict) and "scenario" in d and "tool" in d:
        d = d["scenario"]
    return scenario_from_dict(d)


# -- built-in scenario ---------------------------------------------------------

LINK_CAPACITY = 1_000_000
TOPIC_RATE = 2_000
MSG_SIZE = 500


def build_paper_poc() -> Scenario:
    """Three aggregators, two clients, two cross-traffic hosts on a 1 MB/s switched backbone."""
    aggs = ["ag1", "ag2", "ag3"]
    clients = ["c1", "c2"]
    nodes = (
        [Node(a, "aggregator") for a in aggs]
        + [Node(c, "consumer") for c in clients]
        + [Node("orch", "orchestrator"), Node("tg1", "traffic_gen"), Node("tg2", "traffic_gen")]
        + [Node(s, "switch") for s in ("s1", "s2", "s3")]
    )
    edges = [(a, "s1") for a in aggs] + [("tg1", "s1"), ("s1", "s2"), ("orch", "s2"), ("s2", "s3"),
                                        ("tg2", "s3")] + [(c, "s3") for c in clients]
    links = tuple(Link(f"{a}-{b}", a, b, LINK_CAPACITY) for a, b in edges)
    core = ("s1-s2", "s2-s3")
    routes = [Route(a, c, (f"{a}-s1",) + core + (f"{c}-s3",)) for a in aggs for c in clients]
    routes += [Route("tg1", "tg2", ("tg1-s1",) + core + ("tg2-s3",)),
               Route("tg2", "tg1", ("tg2-s3",) + tuple(reversed(core)) + ("tg1-s1",))]
    topology = Topology(tuple(nodes), links, tuple(routes))

    split = (0.25, 0.35, 0.45)
    # bc is indexed by traffic class, i.e. reversed QoS order.
    bc = proportional_bc(LINK_CAPACITY, tuple(reversed(split)))
    bam_cfg = {l.id: BandwidthConstraints(Model.ATCS, bc) for l in links}

    specs = []
    for a in aggs:
        topics = [Topic(f"{a}/t{k}", a, TOPIC_RATE, MSG_SIZE) for k in (1, 2, 3)]
        if a == "ag1":
            topics.append(Topic("ag1/t4", a, 100 * TOPIC_RATE, MSG_SIZE))
        specs.append(AggregatorSpec(a, tuple(topics), BufferConfig(1_000_000, Overflow.DROP_OLDEST),
                                    (10_000, 20_000, 30_000)))

    cross = (
        CrossTraffic("x1", "tg1", "tg2", 200_000, topology.route("tg1", "tg2")),
        CrossTraffic("x2", "tg2", "tg1", 200_000, topology.route("tg2", "tg1")),
    )
    events = [ScenarioEvent(0, "start_hosts", label="hosts_startup")]
    events += [ScenarioEvent(100, "subscribe", "c1", a, f"{a}/t1", 1, "client1_subscriptions") for a in aggs]
    events += [ScenarioEvent(600, "subscribe", "c2", a, f"{a}/t1", 2, "client2_subscriptions") for a in aggs]
    events += [ScenarioEvent(600, "subscribe", "c2", "ag1", "ag1/t4", 2, "client2_subscriptions"),
               ScenarioEvent(1800, "end", label="end_of_scenario")]

    return Scenario(
        name="paper-poc",
        topology=topology,
        bam=bam_cfg,
        aggregators=tuple(specs),
        consumers=tuple(clients),
        orchestrator=OrchestratorConfig(900_000, split, 0.5, RecomputePolicy()),
        cross_traffic=cross,
        events=tuple(events),
        sim=SimConfig(tick_duration=0.1, seed=0, metadata_interval=10, rate_window=10),
    )


BUILTINS = {"paper-poc": build_paper_poc}
