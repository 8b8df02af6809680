"""Fixed-tick discrete-event kernel.

Each tick runs six phases in a fixed order: scenario events, device sources
into aggregators, cross-traffic load, metadata -> orchestrator -> assignments,
aggregator transmission and transport, metrics sampling. Transport is fluid:
bytes sent in a tick arrive in that tick.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from . import bam
from .aggregator import LEVELS, Aggregator, Delivery
from .model import Topic, as_fraction
from .orchestrator import Orchestrator
from .scenario import Scenario, validate_scenario

COMPONENTS = ("scenario", "source", "aggregator", "cross", "orchestrator", "bam", "transport", "metrics", "kernel")
_RANK = {c: i for i, c in enumerate(COMPONENTS)}

METRIC_COLUMNS = ("tick", "agg_id", "class", "occupancy", "rate", "delivered", "dropped")
LINK_COLUMNS = ("tick", "link_id", "utilization", "iot_rate", "cross_rate")


class DeviceSource:
    """Whole-message emitter; fractional bytes carry over between ticks."""

    def __init__(self, topic: str, rate: int, msg_size: int, phase: float = 0.0,
                 jitter: float = 0.0, rng: Optional[random.Random] = None):
        if msg_size <= 0:
            raise ValueError("msg_size must be positive")
        self.topic = topic
        self.rate = rate
        self.msg_size = msg_size
        self.jitter = jitter
        self.rng = rng
        self.carry = as_fraction(phase) * msg_size

    @classmethod
    def for_topic(cls, t: Topic, seed: int = 0) -> "DeviceSource":
        rng = random.Random(f"{seed}:{t.aggregator_id}:{t.name}") if t.jitter else None
        return cls(t.name, t.gen_rate, t.msg_size, t.phase, t.jitter, rng)

    def tick(self, dt) -> list[tuple[str, int]]:
        produced = self.rate * as_fraction(dt)
        if self.jitter and self.rng is not None:
            produced *= 1 + as_fraction(round(self.rng.uniform(-self.jitter, self.jitter), 6))
        self.carry += produced
        n = int(self.carry // self.msg_size)
        self.carry -= n * self.msg_size
        return [(self.topic, self.msg_size)] * n


def source_tick(src: DeviceSource, dt) -> list[tuple[str, int]]:
    return src.tick(dt)


@dataclass(frozen=True)
class Flow:
    aggregator_id: str
    level: int
    consumer_id: str
    route: tuple[str, ...]
    channel_bw: int  # bytes/s granted to the (aggregator, level) channel; 0 if none


@dataclass
class TransportReport:
    delivered: list[Delivery]
    utilization: dict[str, float]
    iot_bytes: dict[str, int]
    overloaded: list[str]
    over_budget: list[tuple[str, int, int, int]]  # (agg, level, bytes, allowed)
    unbacked: list[tuple[str, int, int]]


def transport_tick(
    capacities: Mapping[str, int],
    flows: Sequence[tuple[Flow, Delivery]],
    cross_load: Mapping[str, int],
    dt,
) -> TransportReport:
    """Carry one tick of deliveries and report per-link utilization.

    A channel may carry at most two ticks' worth of its bandwidth in one tick:
    the aggregator's token bucket holds one tick of carry-over on top of the
    tick's own budget.
    """
    dt = as_fraction(dt)
    link_bytes = {lid: 0 for lid in capacities}
    per_channel: dict[tuple[str, int], int] = {}
    channel_bw: dict[tuple[str, int], int] = {}
    for flow, d in flows:
        for lid in flow.route:
            link_bytes[lid] += d.size
        key = (flow.aggregator_id, flow.level)
        per_channel[key] = per_channel.get(key, 0) + d.size
        channel_bw[key] = flow.channel_bw
    over, unbacked = [], []
    for key in sorted(per_channel):
        sent, bw = per_channel[key], channel_bw[key]
        if bw == 0:
            unbacked.append((key[0], key[1], sent))
        elif sent > 2 * bw * dt:
            over.append((key[0], key[1], sent, int(2 * bw * dt)))
    util, overloaded = {}, []
    for lid in sorted(capacities):
        u = (Fraction(link_bytes[lid]) / dt + cross_load.get(lid, 0)) / capacities[lid]
        if u > 1:
            overloaded.append(lid)
            u = Fraction(1)
        util[lid] = round(float(u), 6)
    return TransportReport([d for _, d in flows], util, link_bytes, overloaded, over, unbacked)


class EventLog:
    """Records ordered by (tick, component, sequence)."""

    def __init__(self):
        self._records: list[tuple[int, int, int, str, str, dict]] = []
        self._seq = 0

    def add(self, tick: int, component: str, kind: str, **payload) -> None:
        self._records.append((tick, _RANK[component], self._seq, component, kind, payload))
        self._seq += 1

    def records(self) -> list[dict]:
        out = []
        for tick, _, seq, comp, kind, payload in sorted(self._records, key=lambda r: r[:3]):
            out.append({"tick": tick, "component": comp, "seq": seq, "kind": kind, **payload})
        return out

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records() if r["kind"] == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records())

    def __len__(self):
        return len(self._records)


@dataclass
class MetricsSeries:
    rows: list[tuple] = field(default_factory=list)  # METRIC_COLUMNS
    link_rows: list[tuple] = field(default_factory=list)  # LINK_COLUMNS
    balance: list[dict] = field(default_factory=list)  # per-tick byte ledger

    def series(self, agg: str, level: int, column: str) -> list:
        i = METRIC_COLUMNS.index(column)
        return [r[i] for r in self.rows if r[1] == agg and r[2] == level]


@dataclass
class RunResult:
    events: EventLog
    metrics: MetricsSeries
    summary: dict
    fatal: bool = False

    def __iter__(self):
        return iter((self.events, self.metrics))


class Simulation:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = validate_scenario(scenario)
        self.seed = scenario.sim.seed if seed is None else seed
        self.dt = as_fraction(scenario.sim.tick_duration)
        s = scenario
        self.aggs = {
            a.id: Aggregator(a.id, a.topics, a.buffer, a.fallback_rates, self.dt, s.sim.rate_window)
            for a in sorted(s.aggregators, key=lambda a: a.id)
        }
        self.sources = [
            (a.id, DeviceSource.for_topic(t, self.seed))
            for a in sorted(s.aggregators, key=lambda a: a.id)
            for t in a.topics
        ]
        self.net = {
            l.id: bam.LinkState(l.id, l.capacity, s.bam[l.id]) for l in s.topology.links
        }
        self.capacities = {l.id: l.capacity for l in s.topology.links}
        self.orch = Orchestrator(s.orchestrator, self.net, {a: s.channel_path(a) for a in self.aggs})
        self.log = EventLog()
        self.metrics = MetricsSeries()
        self.started = False
        self.started_at = 0
        self.orch_up = True
        self.fatal = False
        self.generated = 0
        self.delivered = {a: [0, 0, 0] for a in self.aggs}
        self.milestones: set[str] = set()
        self.overloads = 0

    # -- phases ----------------------------------------------------------------

    def _scenario_events(self, t: int, md_due: set[str]) -> None:
        for e in self.scenario.events:
            if e.at != t:
                continue
            if e.label and e.label not in self.milestones:
                self.milestones.add(e.label)
                self.log.add(t, "scenario", "milestone", label=e.label)
            if e.kind == "start_hosts":
                self.started = True
                self.started_at = t
                self.log.add(t, "scenario", "start_hosts")
            elif e.kind == "subscribe":
                sub_id, _ = self.aggs[e.aggregator].subscribe(e.consumer, e.topic, e.qos, t)
                md_due.add(e.aggregator)
                self.log.add(t, "scenario", "subscribe", consumer=e.consumer, aggregator=e.aggregator,
                             topic=e.topic, qos=e.qos, sub_id=sub_id)
            elif e.kind == "unsubscribe":
                self.aggs[e.aggregator].unsubscribe(e.consumer, e.topic, t)
                md_due.add(e.aggregator)
                self.log.add(t, "scenario", "unsubscribe", consumer=e.consumer, aggregator=e.aggregator,
                             topic=e.topic)
            elif e.kind == "orchestrator_down":
                self.orch_up = False
                self.log.add(t, "scenario", "orchestrator_down")
                for a in self.aggs.values():
                    a.on_orchestrator_loss()
                    self.log.add(t, "aggregator", "fallback_rates", aggregator=a.id, rates=list(a.rates))
            elif e.kind == "orchestrator_up":
                self.orch_up = True
                self.orch.reissue_all()
                md_due.update(self.aggs)
                self.log.add(t, "scenario", "orchestrator_up")

    def _ingest(self, t: int) -> None:
        for agg_id, src in self.sources:
            agg = self.aggs[agg_id]
            for topic, size in src.tick(self.dt):
                self.generated += size
                agg.ingest(topic, size, t)

    def _cross_load(self, t: int) -> dict[str, int]:
        load = {lid: 0 for lid in self.capacities}
        for x in self.scenario.cross_traffic:
            rate = x.load(t)
            for lid in x.route:
                load[lid] += rate
        return load

    def _control(self, t: int, md_due: set[str]) -> None:
        every = self.scenario.sim.metadata_interval
        for agg_id, agg in self.aggs.items():
            if agg_id not in md_due and (t - self.started_at) % every:
                continue
            md = agg.report_metadata(t)
            if not self.orch_up:
                self.log.add(t, "aggregator", "metadata_lost", aggregator=agg_id)
                continue
            assignments = self.orch.handle_metadata(md)
            for kind, payload in self.orch.drain_events():
                comp = "bam" if kind.startswith("channel_") else "orchestrator"
                self.log.add(t, comp, kind, **payload)
            for ra in assignments:
                applied = self.aggs[ra.aggregator_id].apply_rate_assignment(ra)
                self.log.add(t, "aggregator", "rate_applied" if applied else "rate_stale",
                             aggregator=ra.aggregator_id, epoch=ra.epoch, rates=list(ra.rate_per_class))
        for link in self.net.values():
            bad = bam.check_link(link)
            if bad:
                self._fatal(t, "bam_invariant", link=link.link_id, violations=[str(v) for v in bad])

    def _transmit(self, t: int, cross: Mapping[str, int]):
        flows = []
        topo = self.scenario.topology
        for agg_id, agg in self.aggs.items():
            for d in agg.tick_transmit(self.dt, t):
                flow = Flow(agg_id, d.qos, d.consumer_id, topo.route(agg_id, d.consumer_id),
                            self.orch.channel_bw(agg_id, d.qos))
                flows.append((flow, d))
                self.delivered[agg_id][d.qos] += d.size
        rep = transport_tick(self.capacities, flows, cross, self.dt)
        for lid in rep.overloaded:
            self.overloads += 1
            self.log.add(t, "transport", "overload", link=lid,
                         offered=int(Fraction(rep.iot_bytes[lid]) / self.dt) + cross.get(lid, 0))
        for agg_id, lvl, sent in rep.unbacked:
            self.log.add(t, "transport", "unbacked_delivery", aggregator=agg_id, level=lvl, bytes=sent)
        for agg_id, lvl, sent, allowed in rep.over_budget:
            self._fatal(t, "channel_overrun", aggregator=agg_id, level=lvl, bytes=sent, allowed=allowed)
        return rep

    def _sample(self, t: int, rep: TransportReport, cross: Mapping[str, int], sent, dropped_before) -> None:
        for agg_id, agg in self.aggs.items():
            for lvl in LEVELS:
                buf = agg.buffers[lvl]
                delivered = round(Fraction(sent.get((agg_id, lvl), 0)) / self.dt)
                self.metrics.rows.append((t, agg_id, lvl, buf.occupancy, agg.rates[lvl], delivered,
                                          buf.dropped_total - dropped_before[(agg_id, lvl)]))
        for lid in sorted(self.capacities):
            iot = round(Fraction(rep.iot_bytes[lid]) / self.dt)
            self.metrics.link_rows.append((t, lid, rep.utilization[lid], iot, cross.get(lid, 0)))
        ledger = {k: 0 for k in ("offered", "replicated", "unrouted", "dequeued", "occupancy", "dropped")}
        for agg in self.aggs.values():
            for k, v in agg.balance().items():
                ledger[k] += v
        ledger["tick"] = t
        ledger["generated"] = self.generated
        ledger["delivered"] = sum(sum(v) for v in self.delivered.values())
        self.metrics.balance.append(ledger)
        lhs = self.generated + ledger["replicated"]
        rhs = ledger["dequeued"] + ledger["occupancy"] + ledger["dropped"] + ledger["unrouted"]
        if lhs != rhs or self.generated != ledger["offered"]:
            self._fatal(t, "conservation", generated=self.generated, lhs=lhs, rhs=rhs)

    def _fatal(self, t: int, what: str, **payload) -> None:
        self.fatal = True
        self.log.add(t, "kernel", "fatal", what=what, **payload)

    # -- driver ----------------------------------------------------------------

    def run(self) -> RunResult:
        end = self.scenario.end_tick
        for t in range(end):
            md_due: set[str] = set()
            self._scenario_events(t, md_due)
            dropped_before = {(a, l): agg.buffers[l].dropped_total for a, agg in self.aggs.items() for l in LEVELS}
            if self.started:
                self._ingest(t)
            cross = self._cross_load(t) if self.started else {}
            if self.started:
                self._control(t, md_due)
            before = {(a, l): v for a, row in self.delivered.items() for l, v in enumerate(row)}
            rep = self._transmit(t, cross) if self.started else transport_tick(self.capacities, [], {}, self.dt)
            sent = {k: self.delivered[k[0]][k[1]] - v for k, v in before.items()}
            self._sample(t, rep, cross, sent, dropped_before)
        for e in self.scenario.events:
            if e.kind == "end":
                if e.label and e.label not in self.milestones:
                    self.log.add(end, "scenario", "milestone", label=e.label)
                self.log.add(end, "scenario", "end")
        return RunResult(self.log, self.metrics, self.summary(), self.fatal)

    def summary(self) -> dict:
        aggs = {}
        for agg_id, agg in self.aggs.items():
            lat = [
                round(agg.latency_sum[l] / agg.latency_count[l], 6) if agg.latency_count[l] else None
                for l in LEVELS
            ]
            bal = agg.balance()
            aggs[agg_id] = {
                "offered_bytes": bal["offered"],
                "delivered_bytes": sum(self.delivered[agg_id]),
                "delivered_per_class": list(self.delivered[agg_id]),
                "dropped_bytes": bal["dropped"],
                "dropped_per_class": [b.dropped_total for b in agg.buffers],
                "max_occupancy": [b.peak for b in agg.buffers],
                "final_occupancy": [b.occupancy for b in agg.buffers],
                "buffer_capacity": [b.capacity for b in agg.buffers],
                "mean_latency_ticks": lat,
                "final_rates": list(agg.rates),
            }
        counts = {k: 0 for k in ("reallocation", "channel_granted", "channel_denied", "channel_preempted",
                                  "assignment")}
        for r in self.log.records():
            if r["kind"] in counts:
                counts[r["kind"]] += 1
        return {
            "scenario": self.scenario.name,
            "seed": self.seed,
            "ticks": self.scenario.end_tick,
            "generated_bytes": self.generated,
            "aggregators": aggs,
            "orchestrator": {
                "reallocations": counts["reallocation"],
                "grants": counts["channel_granted"],
                "denials": counts["channel_denied"],
                "preemptions": counts["channel_preempted"],
                "assignments": counts["assignment"],
            },
            "overload_events": self.overloads,
            "fatal": self.fatal,
        }


def run(scenario: Scenario, seed: Optional[int] = None) -> RunResult:
    return Simulation(scenario, seed).run()
