"""IoT gateway aggregator: per-QoS buffers, subscriptions and rate-limited publishing."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, NamedTuple, Optional, Sequence

from .model import QosClass, Topic, as_fraction

LEVELS = (0, 1, 2)


class UnknownTopic(KeyError):
    pass


class DuplicateSubscription(ValueError):
    pass


class UnknownSubscription(KeyError):
    pass


class Overflow(str, Enum):
    DROP_NEW = "drop_new"
    DROP_OLDEST = "drop_oldest"


@dataclass(frozen=True)
class BufferConfig:
    capacity_per_class: int
    overflow: Overflow = Overflow.DROP_OLDEST
    per_class: Optional[tuple[int, int, int]] = None  # optional override, indexed by QoS level

    def __post_init__(self):
        object.__setattr__(self, "overflow", Overflow(self.overflow))
        if self.per_class is not None:
            object.__setattr__(self, "per_class", tuple(int(c) for c in self.per_class))

    def capacity(self, level: int) -> int:
        if self.per_class is not None:
            return self.per_class[level]
        return self.capacity_per_class

    def problems(self) -> list[str]:
        caps = self.per_class if self.per_class is not None else (self.capacity_per_class,)
        out = []
        if self.per_class is not None and len(self.per_class) != 3:
            out.append("per_class must list 3 capacities")
        if any(c <= 0 for c in caps) or self.capacity_per_class <= 0:
            out.append("buffer capacities must be > 0")
        return out


class Item(NamedTuple):
    topic: str
    size: int
    enqueued_at: int


class QosBuffer:
    """Bounded FIFO for one QoS level."""

    def __init__(self, level: int, capacity: int, overflow: Overflow = Overflow.DROP_OLDEST):
        self.level = QosClass(level)
        self.capacity = capacity
        self.overflow = Overflow(overflow)
        self.queue: deque[Item] = deque()
        self.occupancy = 0
        self.peak = 0
        self.accepted_total = 0  # bytes offered to this buffer, stored or not
        self.dropped_total = 0
        self.dequeued_total = 0

    def offer(self, item: Item) -> tuple[bool, int]:
        """Enqueue ``item``; returns (stored, bytes dropped)."""
        self.accepted_total += item.size
        if item.size > self.capacity:
            self.dropped_total += item.size
            return False, item.size
        dropped = 0
        if self.occupancy + item.size > self.capacity:
            if self.overflow is Overflow.DROP_NEW:
                self.dropped_total += item.size
                return False, item.size
            while self.occupancy + item.size > self.capacity:
                old = self.queue.popleft()
                self.occupancy -= old.size
                dropped += old.size
            self.dropped_total += dropped
        self.queue.append(item)
        self.occupancy += item.size
        self.peak = max(self.peak, self.occupancy)
        return True, dropped

    def head(self) -> Optional[Item]:
        return self.queue[0] if self.queue else None

    def pop(self) -> Item:
        item = self.queue.popleft()
        self.occupancy -= item.size
        self.dequeued_total += item.size
        return item

    def discard_head(self) -> Item:
        item = self.queue.popleft()
        self.occupancy -= item.size
        self.dropped_total += item.size
        return item

    def balanced(self) -> bool:
        return self.accepted_total == self.dequeued_total + self.occupancy + self.dropped_total


class TokenBucket:
    """Per-class budget; unused tokens carry over, capped at one tick's worth."""

    def __init__(self, rate: int = 0):
        self.rate = rate
        self.carry = Fraction(0)

    def budget(self, dt: Fraction) -> Fraction:
        return self.carry + self.rate * dt

    def settle(self, left: Fraction, dt: Fraction) -> None:
        self.carry = min(left, self.rate * dt)


@dataclass(frozen=True)
class Subscription:
    sub_id: str
    consumer_id: str
    topic: str
    qos: QosClass
    created_at: int = 0


@dataclass(frozen=True)
class ClassMetadata:
    buffer_capacity: int
    occupancy: int
    ingest_rate: int  # bytes/s, moving average
    subscriber_count: int


@dataclass(frozen=True)
class AggregatorMetadata:
    aggregator_id: str
    classes: tuple[ClassMetadata, ClassMetadata, ClassMetadata]  # indexed by QoS level
    subscriptions: tuple[tuple[str, int], ...]  # (topic, qos)
    timestamp: int

    def hot_levels(self, threshold) -> list[int]:
        thr = as_fraction(threshold)
        return [lvl for lvl, c in enumerate(self.classes) if c.occupancy >= thr * c.buffer_capacity]


@dataclass(frozen=True)
class RateAssignment:
    aggregator_id: str
    rate_per_class: tuple[int, int, int]  # bytes/s, indexed by QoS level
    epoch: int


class Delivery(NamedTuple):
    consumer_id: str
    topic: str
    size: int
    qos: int
    enqueued_at: int
    sent_at: int


@dataclass(frozen=True)
class IngestOutcome:
    status: str  # "stored" | "dropped" | "no_subscribers"
    dropped: int = 0


STORED = IngestOutcome("stored")
NO_SUBSCRIBERS = IngestOutcome("no_subscribers")


class Aggregator:
    def __init__(
        self,
        aggregator_id: str,
        topics: Iterable[Topic],
        buffer: BufferConfig,
        fallback_rates: Optional[Sequence[int]] = None,
        tick_duration=Fraction(1, 10),
        rate_window: int = 10,
    ):
        self.id = aggregator_id
        self.topics = {t.name: t for t in topics}
        self.buffer_config = buffer
        self.buffers = [QosBuffer(l, buffer.capacity(l), buffer.overflow) for l in LEVELS]
        self.buckets = [TokenBucket() for _ in LEVELS]
        self.fallback_rates = tuple(fallback_rates) if fallback_rates is not None else None
        self.last_assigned: Optional[tuple[int, int, int]] = None
        self.epoch = 0
        self.dt = as_fraction(tick_duration)
        self.rate_window = rate_window
        self.subscriptions: dict[tuple[str, str], Subscription] = {}
        self._next_sub = 0
        self._arrivals: list[deque] = [deque() for _ in LEVELS]  # (tick, bytes)
        self.offered_total = 0
        self.unrouted_total = 0
        self.replicated_total = 0
        self.latency_sum = [0, 0, 0]
        self.latency_count = [0, 0, 0]
        if self.fallback_rates is not None:
            self._set_rates(self.fallback_rates)

    # -- subscriptions -------------------------------------------------------

    def subscribe(self, consumer_id: str, topic: str, qos, now: int = 0):
        if topic not in self.topics:
            raise UnknownTopic(topic)
        key = (consumer_id, topic)
        if key in self.subscriptions:
            raise DuplicateSubscription(f"{consumer_id} already subscribes {self.id}/{topic}")
        sub_id = f"{self.id}:s{self._next_sub}"
        self._next_sub += 1
        self.subscriptions[key] = Subscription(sub_id, consumer_id, topic, QosClass(qos), now)
        return sub_id, self.report_metadata(now)

    def unsubscribe(self, consumer_id: str, topic: str, now: int = 0) -> AggregatorMetadata:
        try:
            del self.subscriptions[(consumer_id, topic)]
        except KeyError:
            raise UnknownSubscription(f"{consumer_id} -> {self.id}/{topic}") from None
        return self.report_metadata(now)

    def subscribers(self, topic: str, level: int) -> list[str]:
        return sorted(s.consumer_id for s in self.subscriptions.values() if s.topic == topic and s.qos == level)

    # -- data path -----------------------------------------------------------

    def ingest(self, topic: str, payload_size: int, now: int) -> IngestOutcome:
        if topic not in self.topics:
            raise UnknownTopic(topic)
        if payload_size <= 0:
            raise ValueError("payload_size must be positive")
        self.offered_total += payload_size
        levels = sorted({s.qos for s in self.subscriptions.values() if s.topic == topic})
        if not levels:
            self.unrouted_total += payload_size
            return NO_SUBSCRIBERS
        self.replicated_total += payload_size * (len(levels) - 1)
        all_stored, dropped = True, 0
        for lvl in levels:
            self._note_arrival(lvl, now, payload_size)
            stored, lost = self.buffers[lvl].offer(Item(topic, payload_size, now))
            all_stored &= stored
            dropped += lost
        if all_stored and not dropped:
            return STORED
        return IngestOutcome("stored" if all_stored else "dropped", dropped)

    def _note_arrival(self, level: int, tick: int, size: int) -> None:
        q = self._arrivals[level]
        if q and q[-1][0] == tick:
            q[-1] = (tick, q[-1][1] + size)
        else:
            q.append((tick, size))

    def ingest_rate(self, level: int, now: int) -> int:
        q = self._arrivals[level]
        while q and q[0][0] <= now - self.rate_window:
            q.popleft()
        total = sum(b for t, b in q if t <= now)
        return int(total / (self.rate_window * self.dt))

    def tick_transmit(self, dt=None, now: int = 0) -> list[Delivery]:
        """Drain each class buffer FIFO within its token budget.

        An item costs its size once per subscriber it fans out to. Items whose
        subscribers have all gone are discarded as drops without using tokens.
        """
        dt = self.dt if dt is None else as_fraction(dt)
        if dt <= 0:
            raise ValueError("dt must be positive")
        out: list[Delivery] = []
        for lvl in LEVELS:
            buf, bucket = self.buffers[lvl], self.buckets[lvl]
            tokens = bucket.budget(dt)
            while buf.queue:
                head = buf.head()
                subs = self.subscribers(head.topic, lvl)
                if not subs:
                    buf.discard_head()
                    continue
                cost = head.size * len(subs)
                if cost > tokens:
                    break
                tokens -= cost
                item = buf.pop()
                self.latency_sum[lvl] += now - item.enqueued_at
                self.latency_count[lvl] += 1
                out.extend(Delivery(c, item.topic, item.size, lvl, item.enqueued_at, now) for c in subs)
            bucket.settle(tokens, dt)
        return out

    # -- control path --------------------------------------------------------

    @property
    def rates(self) -> tuple[int, int, int]:
        return tuple(b.rate for b in self.buckets)

    def _set_rates(self, rates: Sequence[int]) -> None:
        for b, r in zip(self.buckets, rates):
            b.rate = int(r)
            b.carry = min(b.carry, b.rate * self.dt)

    def apply_rate_assignment(self, ra: RateAssignment) -> bool:
        if ra.aggregator_id != self.id or ra.epoch <= self.epoch:
            return False
        self.epoch = ra.epoch
        self.last_assigned = tuple(ra.rate_per_class)
        self._set_rates(ra.rate_per_class)
        return True

    def predefined_rates(self) -> tuple[int, int, int]:
        if self.fallback_rates is not None:
            return self.fallback_rates
        if self.last_assigned is not None:
            return tuple(r // 10 for r in self.last_assigned)
        return (0, 0, 0)

    def on_orchestrator_loss(self) -> None:
        self._set_rates(self.predefined_rates())

    def report_metadata(self, now: int) -> AggregatorMetadata:
        classes = []
        for lvl in LEVELS:
            buf = self.buffers[lvl]
            classes.append(
                ClassMetadata(
                    buffer_capacity=buf.capacity,
                    occupancy=buf.occupancy,
                    ingest_rate=self.ingest_rate(lvl, now),
                    subscriber_count=sum(1 for s in self.subscriptions.values() if s.qos == lvl),
                )
            )
        subs = tuple(sorted((s.topic, int(s.qos)) for s in self.subscriptions.values()))
        return AggregatorMetadata(self.id, tuple(classes), subs, now)

    # -- accounting ----------------------------------------------------------

    def buffered_bytes(self) -> int:
        return sum(b.occupancy for b in self.buffers)

    def balance(self) -> dict:
        """Byte ledger; ``offered + replicated - unrouted == dequeued + occupancy + dropped``."""
        return {
            "offered": self.offered_total,
            "replicated": self.replicated_total,
            "unrouted": self.unrouted_total,
            "dequeued": sum(b.dequeued_total for b in self.buffers),
            "occupancy": self.buffered_bytes(),
            "dropped": sum(b.dropped_total for b in self.buffers),
        }
