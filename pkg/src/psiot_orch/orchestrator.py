"""Central scheduler: per-aggregator class rates backed by BAM channels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

from . import bam
from .aggregator import LEVELS, AggregatorMetadata, RateAssignment
from .model import as_fraction, qos_to_tc

DEFAULT_SPLIT = (0.25, 0.35, 0.45)
# Largest class-split total accepted. Per-class shares are ceilings on an
# aggregator's even share, and the default split oversubscribes it by 5%.
MAX_SPLIT_SUM = Fraction(105, 100)
SPLIT_TOL = Fraction(1, 10**9)


class NoAggregators(ValueError):
    pass


@dataclass(frozen=True)
class RecomputePolicy:
    mode: str = "on_every_metadata"  # or "interval"
    ticks: int = 0

    @classmethod
    def interval(cls, ticks: int) -> "RecomputePolicy":
        return cls("interval", ticks)

    def problems(self) -> list[str]:
        if self.mode == "on_every_metadata":
            return []
        if self.mode == "interval":
            return [] if self.ticks >= 1 else ["interval recompute needs ticks >= 1"]
        return [f"unknown recompute mode {self.mode!r}"]


@dataclass(frozen=True)
class OrchestratorConfig:
    total_budget: int
    class_split: tuple[float, float, float] = DEFAULT_SPLIT
    buffer_threshold: float = 0.5
    recompute_policy: RecomputePolicy = field(default_factory=RecomputePolicy)

    def problems(self) -> dict[str, str]:
        """Field name -> complaint, for every invalid field."""
        out = {}
        if not self.total_budget > 0:
            out["total_budget"] = f"must be > 0, got {self.total_budget}"
        split = self.class_split
        if len(split) != 3:
            out["class_split"] = f"needs 3 fractions, got {len(split)}"
        else:
            fr = [as_fraction(x) for x in split]
            total = sum(fr)
            if any(x < 0 for x in fr):
                out["class_split"] = "fractions must be nonnegative"
            elif not (1 - SPLIT_TOL <= total <= MAX_SPLIT_SUM + SPLIT_TOL):
                out["class_split"] = f"fractions sum to {float(total):g}; allowed range is [1, {float(MAX_SPLIT_SUM):g}]"
        if not 0 < self.buffer_threshold <= 1:
            out["buffer_threshold"] = f"must lie in (0, 1], got {self.buffer_threshold}"
        for p in self.recompute_policy.problems():
            out["recompute_policy"] = p
        return out

    def rate_ceiling(self) -> int:
        """Upper bound on the sum of all assigned rates."""
        return math.floor(self.total_budget * sum(as_fraction(x) for x in self.class_split))


def compute_rates(cfg: OrchestratorConfig, aggregators: Iterable[str]) -> dict[str, tuple[int, int, int]]:
    """Even share of the budget per aggregator, split across QoS levels."""
    ids = sorted(set(aggregators))
    if not ids:
        raise NoAggregators("no aggregators to schedule")
    share = Fraction(cfg.total_budget, len(ids))
    per_class = tuple(math.floor(share * as_fraction(f)) for f in cfg.class_split)
    return {a: per_class for a in ids}


@dataclass(frozen=True)
class Reallocation:
    aggregator_id: str
    level: int
    deficit: int
    slack: int
    headroom: int
    granted: int
    donors: tuple[tuple[str, int, int, int], ...]  # (aggregator, rate before, rate after, ingest)

    def to_dict(self) -> dict:
        return {
            "aggregator": self.aggregator_id,
            "level": self.level,
            "deficit": self.deficit,
            "slack": self.slack,
            "headroom": self.headroom,
            "granted": self.granted,
            "donors": [{"aggregator": a, "from": f, "to": t, "ingest": i} for a, f, t, i in self.donors],
        }


def _apportion(total: int, weights: Mapping[str, int]) -> dict[str, int]:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder, ties by key)."""
    wsum = sum(weights.values())
    if not total or not wsum:
        return {k: 0 for k in weights}
    exact = {k: Fraction(total * w, wsum) for k, w in weights.items()}
    out = {k: math.floor(v) for k, v in exact.items()}
    left = total - sum(out.values())
    for k in sorted(weights, key=lambda k: (-(exact[k] - out[k]), k))[:left]:
        out[k] += 1
    return out


def reactive_reallocate(
    rates: Mapping[str, Sequence[int]],
    metadata: Mapping[str, AggregatorMetadata],
    hot: tuple[str, int],
    headroom: int,
) -> tuple[dict[str, tuple[int, int, int]], Reallocation]:
    """Move unused bandwidth of class ``level`` from other aggregators to a hot one.

    Donors only give what they are not using (assigned minus measured ingest),
    the hot class only takes what it lacks, and the result is capped by
    ``headroom``: the largest channel the hot class can hold on its route.
    """
    agg, level = hot
    assigned = rates[agg][level]
    deficit = max(0, metadata[agg].classes[level].ingest_rate - assigned)
    slack = {}
    for other in sorted(rates):
        if other == agg:
            continue
        spare = rates[other][level] - metadata[other].classes[level].ingest_rate
        if spare > 0:
            slack[other] = spare
    total_slack = sum(slack.values())
    grant = min(total_slack, deficit, max(0, headroom - assigned))
    cuts = _apportion(grant, slack)

    out = {a: tuple(r) for a, r in rates.items()}
    donors = []
    for other, cut in cuts.items():
        if not cut:
            continue
        before = out[other][level]
        row = list(out[other])
        row[level] = before - cut
        out[other] = tuple(row)
        donors.append((other, before, before - cut, metadata[other].classes[level].ingest_rate))
    row = list(out[agg])
    row[level] += grant
    out[agg] = tuple(row)
    return out, Reallocation(agg, level, deficit, total_slack, headroom, grant, tuple(donors))


class Orchestrator:
    """Keeps the latest metadata per aggregator and re-derives every rate on each update.

    One channel (LSP) is held per (aggregator, QoS level) along the
    aggregator's backbone path. A channel is sized to the larger of the base
    rate and the assigned rate, so a donor's reservation survives while it
    lends rate to a hot aggregator.
    """

    def __init__(
        self,
        cfg: OrchestratorConfig,
        net: Mapping[str, bam.LinkState],
        channel_paths: Mapping[str, Sequence[str]],
    ):
        self.cfg = cfg
        self.net = net
        self.paths = {a: tuple(p) for a, p in channel_paths.items()}
        self.known: dict[str, AggregatorMetadata] = {}
        self.assignments: dict[str, RateAssignment] = {}
        self.channels: dict[tuple[str, int], tuple[str, int]] = {}  # (agg, level) -> (lsp_id, bw)
        self.epoch = 0
        self.now = 0
        self.events: list[tuple[str, dict]] = []
        self._reissue: set[str] = set()
        self._victims: set[tuple[str, int]] = set()
        self._last_recompute: Optional[int] = None
        self._lsp_seq = 0

    # -- helpers -------------------------------------------------------------

    def _log(self, kind: str, **payload) -> None:
        self.events.append((kind, payload))

    def drain_events(self) -> list[tuple[str, dict]]:
        ev, self.events = self.events, []
        return ev

    def channel_bw(self, agg: str, level: int) -> int:
        ch = self.channels.get((agg, level))
        return ch[1] if ch else 0

    def channel_headroom(self, agg: str, level: int) -> int:
        own = self.channels.get((agg, level))
        return bam.path_headroom(self.net, self.paths[agg], qos_to_tc(level), own[0] if own else None)

    def reissue_all(self) -> None:
        """Force fresh assignments to everyone, e.g. after an orchestrator restart."""
        self._reissue.update(self.known)

    # -- channels ------------------------------------------------------------

    def _release(self, agg: str, level: int) -> None:
        lsp_id, bw = self.channels.pop((agg, level))
        bam.release_path(self.net, lsp_id)
        self._log("channel_released", aggregator=agg, level=level, lsp=lsp_id, bw=bw)

    def request_channel(self, agg: str, level: int, bw: int) -> bam.Decision:
        """Resize the (agg, level) channel to ``bw``; on denial the previous grant is restored."""
        tc = int(qos_to_tc(level))
        prev = self.channels.get((agg, level))
        if prev is not None:
            bam.release_path(self.net, prev[0])
            del self.channels[(agg, level)]
        lsp_id = f"{agg}/q{level}/{self._lsp_seq}"
        self._lsp_seq += 1
        d = bam.allocate_path(self.net, self.paths[agg], tc, bw, lsp_id, self.now)
        if d.granted:
            self.channels[(agg, level)] = (lsp_id, bw)
            self._log("channel_granted", aggregator=agg, level=level, lsp=lsp_id, bw=bw,
                      previous=prev[1] if prev else 0)
            for victim in d.preempted:
                self._on_preempted(victim, by=lsp_id)
            return d
        self._log("channel_denied", aggregator=agg, level=level, bw=bw, link=d.link_id,
                  previous=prev[1] if prev else 0)
        if prev is not None:
            back = bam.allocate_path(self.net, self.paths[agg], tc, prev[1], prev[0], self.now)
            assert back.outcome is bam.Outcome.GRANTED, "restoring a released grant cannot fail"
            self.channels[(agg, level)] = prev
        return d

    def _on_preempted(self, lsp_id: str, by: str) -> None:
        for key, (lid, bw) in list(self.channels.items()):
            if lid == lsp_id:
                del self.channels[key]
                self._victims.add(key)
                self._reissue.add(key[0])
                self._log("channel_preempted", aggregator=key[0], level=key[1], lsp=lid, bw=bw, by=by)

    def _shrink(self, targets: Mapping[tuple[str, int], int]) -> None:
        for k in sorted(set(targets) | set(self.channels)):
            want = targets.get(k, 0)
            if want >= self.channel_bw(*k):
                continue
            if want == 0:
                self._release(*k)
            else:
                self.request_channel(k[0], k[1], want)

    def _sync_channels(self, targets: Mapping[tuple[str, int], int]) -> None:
        self._victims = set()
        keys = sorted(set(targets) | set(self.channels))
        grow = [k for k in keys if targets.get(k, 0) > self.channel_bw(*k)]
        self._shrink(targets)
        for k in grow:
            if k in self._victims:
                continue
            want = targets[k]
            if want <= self.channel_bw(*k):
                continue
            if not self.request_channel(k[0], k[1], want).granted:
                cap = self.channel_headroom(*k)
                if cap > self.channel_bw(*k):
                    self.request_channel(k[0], k[1], cap)
        # Preempted channels come back only as far as free space allows.
        for k in sorted(self._victims):
            want = min(targets.get(k, 0), self.channel_headroom(*k))
            if want > 0 and k not in self.channels:
                self.request_channel(k[0], k[1], want)

    # -- scheduling ----------------------------------------------------------

    def _due(self, now: int) -> bool:
        pol = self.cfg.recompute_policy
        if pol.mode != "interval" or self._last_recompute is None:
            return True
        return now - self._last_recompute >= pol.ticks

    def handle_metadata(self, md: AggregatorMetadata) -> list[RateAssignment]:
        self.now = md.timestamp
        if md.aggregator_id not in self.known:
            self._reissue.add(md.aggregator_id)
        self.known[md.aggregator_id] = md
        self._log("metadata", aggregator=md.aggregator_id,
                  occupancy=[c.occupancy for c in md.classes],
                  ingest=[c.ingest_rate for c in md.classes],
                  subscribers=[c.subscriber_count for c in md.classes])
        if not self._due(md.timestamp):
            return []
        self._last_recompute = md.timestamp
        return self.recompute()

    def recompute(self) -> list[RateAssignment]:
        base = compute_rates(self.cfg, self.known)
        hot = [(agg, level) for agg in sorted(self.known)
               for level in sorted(self.known[agg].hot_levels(self.cfg.buffer_threshold), reverse=True)]
        # Give back space held above the new base so headroom is measured
        # against this round's shares; hot channels keep theirs.
        self._shrink({k: (self.channel_bw(*k) if k in hot else base.get(k[0], (0, 0, 0))[k[1]])
                      for k in self.channels})
        rates = dict(base)
        for key in hot:
            rates, realloc = self.reactive_reallocate(rates, key)
            self._log("reallocation", **realloc.to_dict())

        targets = {}
        for agg, row in rates.items():
            for level in LEVELS:
                targets[(agg, level)] = max(base[agg][level], row[level])
        self._sync_channels(targets)

        out = []
        for agg in sorted(rates):
            final = tuple(min(r, self.channel_bw(agg, lvl)) for lvl, r in enumerate(rates[agg]))
            cur = self.assignments.get(agg)
            if cur is not None and cur.rate_per_class == final and agg not in self._reissue:
                continue
            self.epoch += 1
            ra = RateAssignment(agg, final, self.epoch)
            self.assignments[agg] = ra
            out.append(ra)
            self._log("assignment", aggregator=agg, rates=list(final), epoch=self.epoch)
        self._reissue.clear()
        return out

    def reactive_reallocate(self, rates, hot: tuple[str, int]):
        headroom = self.channel_headroom(*hot)
        return reactive_reallocate(rates, self.known, hot, headroom)

    # -- invariants ------------------------------------------------------------

    def assigned_total(self) -> int:
        return sum(sum(ra.rate_per_class) for ra in self.assignments.values())

    def unbacked(self) -> list[tuple[str, int]]:
        """(aggregator, level) pairs whose assigned rate exceeds their channel."""
        return [
            (agg, lvl)
            for agg, ra in sorted(self.assignments.items())
            for lvl, r in enumerate(ra.rate_per_class)
            if r > self.channel_bw(agg, lvl)
        ]
