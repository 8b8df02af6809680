"""Shared vocabulary: QoS levels, traffic classes, topics and topology."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Optional

NODE_KINDS = ("aggregator", "consumer", "orchestrator", "switch", "traffic_gen")


class QosClass(IntEnum):
    INSENSITIVE = 0
    SENSITIVE = 1
    PRIORITY = 2


class TrafficClass(IntEnum):
    """BAM-side class; index 0 is the most protected."""

    TC0 = 0
    TC1 = 1
    TC2 = 2


def qos_to_tc(q: QosClass | int) -> TrafficClass:
    return TrafficClass(2 - QosClass(q))


def tc_to_qos(tc: TrafficClass | int) -> QosClass:
    return QosClass(2 - TrafficClass(tc))


def as_fraction(x) -> Fraction:
    """Exact rational for a decimal-looking number (0.1 -> 1/10, not the binary float)."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(str(x))


@dataclass(frozen=True)
class Topic:
    name: str
    aggregator_id: str
    gen_rate: int  # bytes/s produced by the simulated source
    msg_size: int
    phase: float = 0.0  # fraction of one message preloaded into the source carry
    jitter: float = 0.0


@dataclass(frozen=True)
class Node:
    id: str
    kind: str


@dataclass(frozen=True)
class Link:
    id: str
    a: str
    b: str
    capacity: int  # bytes/s


@dataclass(frozen=True)
class Route:
    src: str
    dst: str
    links: tuple[str, ...]


@dataclass(frozen=True)
class Topology:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    routes: tuple[Route, ...] = ()

    @cached_property
    def link_map(self) -> dict[str, Link]:
        return {l.id: l for l in self.links}

    @cached_property
    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def route_map(self) -> dict[tuple[str, str], tuple[str, ...]]:
        return {(r.src, r.dst): r.links for r in self.routes}

    def route(self, src: str, dst: str) -> tuple[str, ...]:
        return self.route_map[(src, dst)]

    def nodes_of(self, kind: str) -> list[str]:
        return sorted(n.id for n in self.nodes if n.kind == kind)


class ValidatedTopology(Topology):
    """A Topology that has passed validate_topology."""


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    location: str = ""

    def __str__(self):
        loc = f"{self.location}: " if self.location else ""
        return f"{loc}{self.code}: {self.message}"


class ValidationError(ValueError):
    def __init__(self, issues: Iterable[Issue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))

    @property
    def codes(self) -> list[str]:
        return [i.code for i in self.issues]


def walk_route(topology: Topology, src: str, links: Iterable[str]) -> Optional[str]:
    """Follow ``links`` from ``src``; return the end node or None if the chain breaks."""
    here = src
    for lid in links:
        link = topology.link_map.get(lid)
        if link is None:
            return None
        if here == link.a:
            here = link.b
        elif here == link.b:
            here = link.a
        else:
            return None
    return here


def topology_issues(t: Topology, where: str = "topology") -> list[Issue]:
    issues: list[Issue] = []
    seen: set[str] = set()
    for i, n in enumerate(t.nodes):
        loc = f"{where}.nodes[{i}]"
        if n.id in seen:
            issues.append(Issue("DuplicateId", f"node id {n.id!r} declared twice", loc))
        seen.add(n.id)
        if n.kind not in NODE_KINDS:
            issues.append(Issue("UnknownNodeKind", f"{n.kind!r} for node {n.id!r}", loc))
    link_ids: set[str] = set()
    for i, l in enumerate(t.links):
        loc = f"{where}.links[{i}]"
        if l.id in link_ids or l.id in seen:
            issues.append(Issue("DuplicateId", f"link id {l.id!r} declared twice", loc))
        link_ids.add(l.id)
        if not l.capacity > 0:
            issues.append(Issue("NonPositiveCapacity", f"link {l.id!r} capacity {l.capacity}", loc))
        for end in (l.a, l.b):
            if end not in seen:
                issues.append(Issue("UnknownNode", f"link {l.id!r} endpoint {end!r}", loc))
    pairs: set[tuple[str, str]] = set()
    for i, r in enumerate(t.routes):
        loc = f"{where}.routes[{i}]"
        if (r.src, r.dst) in pairs:
            issues.append(Issue("DuplicateId", f"route {r.src}->{r.dst} declared twice", loc))
        pairs.add((r.src, r.dst))
        dangling = [lid for lid in r.links if lid not in link_ids]
        for lid in dangling:
            issues.append(Issue("DanglingLink", f"route {r.src}->{r.dst} names unknown link {lid!r}", loc))
        if dangling:
            continue
        if not r.links or len(set(r.links)) != len(r.links) or walk_route(t, r.src, r.links) != r.dst:
            issues.append(Issue("BrokenRoute", f"links {list(r.links)} do not connect {r.src} to {r.dst}", loc))
    for a in t.nodes_of("aggregator"):
        for c in t.nodes_of("consumer"):
            if (a, c) not in pairs:
                issues.append(Issue("MissingRoute", f"no route {a}->{c}", f"{where}.routes"))
    return issues


def validate_topology(t: Topology) -> ValidatedTopology:
    if isinstance(t, ValidatedTopology):
        return t
    issues = topology_issues(t)
    if issues:
        raise ValidationError(issues)
    return ValidatedTopology(nodes=t.nodes, links=t.links, routes=t.routes)


def shared_prefix(paths: Iterable[tuple[str, ...]]) -> tuple[str, ...]:
    paths = list(paths)
    if not paths:
        return ()
    out = []
    for hops in zip(*paths):
        if len(set(hops)) != 1:
            break
        out.append(hops[0])
    return tuple(out)
