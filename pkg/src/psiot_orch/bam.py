"""Per-link bandwidth admission: MAM, RDM and AllocTC-Sharing (ATCS).

Class indices are traffic-class indices (0 = most protected). A link holds
LSPs; each LSP carries a draw map saying which bandwidth-constraint pool its
bandwidth is taken from. Under MAM and RDM the draw is always the LSP's own
class; under ATCS an LSP may borrow from other pools and such loans can be
preempted when the pool owner needs its space back.

Mutations are single-writer: callers serialize access per link (and over all
links of a path for allocate_path).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, NamedTuple, Optional, Sequence

N_CLASSES = 3


class Model(str, Enum):
    MAM = "MAM"
    RDM = "RDM"
    ATCS = "ATCS"


class DuplicateLspId(ValueError):
    pass


class UnknownLsp(KeyError):
    pass


@dataclass(frozen=True)
class BandwidthConstraints:
    model: Model
    bc: tuple[int, int, int]
    # Proactive return of loans is not supported; only False is accepted.
    devolution: bool = False

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        object.__setattr__(self, "bc", tuple(int(x) for x in self.bc))

    def problems(self, capacity: int) -> list[str]:
        out = []
        if len(self.bc) != N_CLASSES:
            return [f"bc must have {N_CLASSES} entries, got {len(self.bc)}"]
        if any(b < 0 for b in self.bc):
            out.append(f"bc entries must be >= 0, got {list(self.bc)}")
        if self.model is Model.MAM:
            if any(b > capacity for b in self.bc):
                out.append(f"MAM bc entries must not exceed capacity {capacity}")
        elif sum(self.bc) != capacity:
            out.append(f"{self.model.value} bc must sum to capacity {capacity}, got {sum(self.bc)}")
        if self.devolution:
            out.append("devolution is not supported")
        return out


def proportional_bc(capacity: int, weights: Sequence) -> tuple[int, int, int]:
    """Split ``capacity`` into integer pools proportional to ``weights`` (largest remainder)."""
    from .model import as_fraction

    w = [as_fraction(x) for x in weights]
    total = sum(w)
    exact = [capacity * x / total for x in w]
    base = [int(e) for e in exact]
    left = capacity - sum(base)
    by_rem = sorted(range(len(w)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in by_rem[:left]:
        base[i] += 1
    return tuple(base)


@dataclass(frozen=True)
class Lsp:
    lsp_id: str
    tc: int
    bw: int
    draw: Mapping[int, int]
    seq: int = 0  # admission order on this link
    created_at: int = 0

    def drawn(self, pool: int) -> int:
        return self.draw.get(pool, 0)

    def to_dict(self) -> dict:
        return {
            "lsp_id": self.lsp_id,
            "tc": self.tc,
            "bw": self.bw,
            "draw": {str(k): v for k, v in sorted(self.draw.items())},
            "seq": self.seq,
            "created_at": self.created_at,
        }


class Outcome(str, Enum):
    GRANTED = "granted"
    PREEMPTED = "granted_with_preemptions"
    DENIED = "denied"


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    preempted: tuple[str, ...] = ()
    reason: Optional[str] = None
    link_id: Optional[str] = None

    @property
    def granted(self) -> bool:
        return self.outcome is not Outcome.DENIED


GRANTED = Decision(Outcome.GRANTED)


def denied(reason="InsufficientBandwidth", link_id=None) -> Decision:
    return Decision(Outcome.DENIED, reason=reason, link_id=link_id)


class Violation(NamedTuple):
    kind: str
    index: object = None

    def __str__(self):
        return self.kind if self.index is None else f"{self.kind}({self.index})"


@dataclass
class LinkState:
    link_id: str
    capacity: int
    constraints: BandwidthConstraints
    lsps: dict[str, Lsp] = field(default_factory=dict)
    next_seq: int = 0

    def __post_init__(self):
        bad = self.constraints.problems(self.capacity)
        if bad:
            raise ValueError(f"link {self.link_id}: " + "; ".join(bad))

    @property
    def model(self) -> Model:
        return self.constraints.model

    @property
    def bc(self) -> tuple[int, int, int]:
        return self.constraints.bc

    def used(self) -> int:
        return sum(l.bw for l in self.lsps.values())

    def class_usage(self) -> list[int]:
        """Bandwidth held by LSPs of each class."""
        u = [0] * N_CLASSES
        for l in self.lsps.values():
            u[l.tc] += l.bw
        return u

    def pool_usage(self) -> list[int]:
        """Bandwidth drawn from each constraint pool."""
        u = [0] * N_CLASSES
        for l in self.lsps.values():
            for p, v in l.draw.items():
                u[p] += v
        return u

    def pool_free(self) -> list[int]:
        return [b - u for b, u in zip(self.bc, self.pool_usage())]

    def snapshot(self):
        return dict(self.lsps), self.next_seq

    def restore(self, snap) -> None:
        self.lsps, self.next_seq = dict(snap[0]), snap[1]

    def to_dict(self) -> dict:
        return {
            "link_id": self.link_id,
            "capacity": self.capacity,
            "model": self.model.value,
            "bc": list(self.bc),
            "next_seq": self.next_seq,
            "lsps": [self.lsps[k].to_dict() for k in sorted(self.lsps)],
        }

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def preference_order(tc: int) -> list[int]:
    """Pools an ATCS request of class ``tc`` draws from, most preferred first."""
    return [tc] + list(range(tc + 1, N_CLASSES)) + list(range(tc - 1, -1, -1))


def _greedy_draw(free: Sequence[int], tc: int, bw: int) -> dict[int, int]:
    draw = {}
    need = bw
    for p in preference_order(tc):
        take = min(need, max(free[p], 0))
        if take:
            draw[p] = take
            need -= take
        if not need:
            break
    assert need == 0
    return draw


def max_admissible(link: LinkState, tc: int) -> int:
    """Largest bandwidth a new class-``tc`` LSP could get without preempting anyone."""
    if link.model is Model.MAM:
        room = min(link.bc[tc] - link.class_usage()[tc], link.capacity - link.used())
    elif link.model is Model.RDM:
        usage = link.class_usage()
        room = link.capacity - link.used()
        for k in range(tc + 1):
            room = min(room, sum(link.bc[k:]) - sum(usage[k:]))
    else:
        room = min(sum(link.pool_free()), link.capacity - link.used())
    return max(room, 0)


def preemption_victims(link: LinkState, tc: int, shortfall: int) -> Optional[list[Lsp]]:
    """Loans sitting in pool ``tc`` to tear down so ``shortfall`` more bytes/s become free.

    Candidates are taken lowest-priority borrower first, newest first within a
    class, until enough is freed; then every victim whose removal is not needed
    is spared again, starting from the last one picked. Returns None when even
    all loans together are not enough.
    """
    loans = [l for l in link.lsps.values() if l.tc != tc and l.drawn(tc) > 0]
    loans.sort(key=lambda l: (-l.tc, -l.seq))
    chosen, freed = [], 0
    for l in loans:
        chosen.append(l)
        freed += l.bw
        if freed >= shortfall:
            break
    else:
        return None
    for l in reversed(list(chosen)):
        if freed - l.bw >= shortfall:
            chosen.remove(l)
            freed -= l.bw
    return chosen


def admit(link: LinkState, tc: int, bw: int, lsp_id: str, now: int = 0) -> Decision:
    tc = int(tc)
    if lsp_id in link.lsps:
        raise DuplicateLspId(lsp_id)
    if not 0 <= tc < N_CLASSES:
        raise ValueError(f"traffic class {tc} out of range")
    if not bw > 0:
        raise ValueError(f"bandwidth must be positive, got {bw}")

    victims: list[Lsp] = []
    if link.model is Model.ATCS:
        free = link.pool_free()
        if sum(free) < bw:
            victims = preemption_victims(link, tc, bw - sum(free))
            if victims is None:
                return denied(link_id=link.link_id)
            for v in victims:
                for p, amount in v.draw.items():
                    free[p] += amount
        draw = _greedy_draw(free, tc, bw)
    else:
        if max_admissible(link, tc) < bw:
            return denied(link_id=link.link_id)
        draw = {tc: bw}

    for v in victims:
        del link.lsps[v.lsp_id]
    link.lsps[lsp_id] = Lsp(lsp_id, tc, bw, draw, link.next_seq, now)
    link.next_seq += 1
    if victims:
        return Decision(Outcome.PREEMPTED, preempted=tuple(v.lsp_id for v in victims))
    return GRANTED


def release(link: LinkState, lsp_id: str) -> int:
    try:
        lsp = link.lsps.pop(lsp_id)
    except KeyError:
        raise UnknownLsp(lsp_id) from None
    return lsp.bw


def check_link(link: LinkState) -> list[Violation]:
    out: list[Violation] = []
    if link.used() > link.capacity:
        out.append(Violation("CapacityExceeded"))
    for l in sorted(link.lsps.values(), key=lambda l: l.lsp_id):
        if any(v < 0 for v in l.draw.values()):
            out.append(Violation("NegativeDraw", l.lsp_id))
        if sum(l.draw.values()) != l.bw:
            out.append(Violation("DrawMismatch", l.lsp_id))
        if link.model is not Model.ATCS and set(l.draw) - {l.tc}:
            out.append(Violation("ForeignDraw", l.lsp_id))
    bc = link.bc
    if link.model is Model.MAM:
        for c, u in enumerate(link.class_usage()):
            if u > bc[c]:
                out.append(Violation("ClassCapExceeded", c))
    elif link.model is Model.RDM:
        usage = link.class_usage()
        for k in range(N_CLASSES):
            if sum(usage[k:]) > sum(bc[k:]):
                out.append(Violation("NestedCapExceeded", k))
    else:
        for p, u in enumerate(link.pool_usage()):
            if u > bc[p]:
                out.append(Violation("PoolOverflow", p))
    return out


# -- paths -------------------------------------------------------------------


def _drop_everywhere(net: Mapping[str, LinkState], lsp_id: str) -> None:
    for link in net.values():
        link.lsps.pop(lsp_id, None)


def allocate_path(
    net: Mapping[str, LinkState],
    path: Sequence[str],
    tc: int,
    bw: int,
    lsp_id: str,
    now: int = 0,
) -> Decision:
    """Admit on every link of ``path`` or on none.

    LSPs preempted on any hop are removed from every link of ``net`` they
    occupy; on denial the whole network is restored.
    """
    if not path:
        raise ValueError("empty path")
    missing = [lid for lid in path if lid not in net]
    if missing:
        raise KeyError(f"unknown links {missing}")
    if any(lsp_id in net[lid].lsps for lid in path):
        raise DuplicateLspId(lsp_id)
    snaps = {lid: link.snapshot() for lid, link in net.items()}
    preempted: list[str] = []
    for lid in path:
        d = admit(net[lid], tc, bw, lsp_id, now)
        if not d.granted:
            for k, snap in snaps.items():
                net[k].restore(snap)
            return denied(d.reason, lid)
        for victim in d.preempted:
            _drop_everywhere(net, victim)
            preempted.append(victim)
    if preempted:
        return Decision(Outcome.PREEMPTED, preempted=tuple(preempted))
    return GRANTED


def release_path(net: Mapping[str, LinkState], lsp_id: str) -> int:
    """Tear ``lsp_id`` down on every link holding it; returns its bandwidth."""
    bw = None
    for link in net.values():
        if lsp_id in link.lsps:
            bw = release(link, lsp_id)
    if bw is None:
        raise UnknownLsp(lsp_id)
    return bw


def path_headroom(net: Mapping[str, LinkState], path: Sequence[str], tc: int, own: Optional[str] = None) -> int:
    """Largest class-``tc`` reservation the path could hold without preemption.

    With ``own`` given, the bandwidth that LSP already holds counts as available
    (it would be released before re-admission).
    """
    room = None
    for lid in path:
        link = net[lid]
        r = max_admissible(link, tc)
        if own is not None and own in link.lsps:
            r = _headroom_with_release(link, tc, own)
        room = r if room is None else min(room, r)
    return room or 0


def _headroom_with_release(link: LinkState, tc: int, lsp_id: str) -> int:
    snap = link.snapshot()
    try:
        release(link, lsp_id)
        return max_admissible(link, tc)
    finally:
        link.restore(snap)
