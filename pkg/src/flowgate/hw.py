"""Discrete-time emulation of a SmartNIC flow manager.

The hardware table is a two-choice bucketized cuckoo hash. New entries are
programmed from a software queue, rate-limited by a token bucket whose
refill rate collapses once the table is nearly full. Entries that stay idle
longer than ``hw_idle_timeout`` are purged and reported to the host with
their final counters.
"""

from __future__ import annotations

import math
import random
from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, NamedTuple

from .errors import ConfigInvalid, ZeroFlowId
from .flow_core import NS_PER_SEC, NS_PER_US, FlowKey, Packet, SimTime

_M64 = (1 << 64) - 1
_TOKEN = NS_PER_SEC  # token credit is kept in integer token-nanoseconds

# pseudo egress port for passive mode: packets are counted, never transmitted
ANALYTICS_PORT = -1


class ActionKind(Enum):
    TO_HOST = "host"
    PASS = "pass"
    DROP = "drop"


@dataclass(frozen=True, slots=True)
class FlowAction:
    kind: ActionKind
    port: int | None = None

    @classmethod
    def pass_to(cls, port: int) -> FlowAction:
        return cls(ActionKind.PASS, port)

    @classmethod
    def drop(cls) -> FlowAction:
        return cls(ActionKind.DROP)

    @classmethod
    def to_host(cls) -> FlowAction:
        return cls(ActionKind.TO_HOST)

    def __str__(self) -> str:
        return f"pass:{self.port}" if self.kind is ActionKind.PASS else self.kind.value


@dataclass
class HwConfig:
    capacity: int = 4096
    buckets_per_slot: int = 4
    max_kicks: int = 32
    learn_rate_per_sec: float = 1000.0
    learn_burst: int = 100
    degrade_threshold: float = 0.9
    degrade_floor: float = 0.1
    program_latency: SimTime = 10 * NS_PER_US
    hw_idle_timeout: SimTime = 30 * NS_PER_SEC
    hash_seeds: tuple[int, int] = (0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F)
    streams: int = 1

    def validate(self) -> HwConfig:
        if self.capacity < 1:
            raise ConfigInvalid("must be >= 1", "hw.capacity")
        if self.buckets_per_slot < 1:
            raise ConfigInvalid("must be >= 1", "hw.buckets_per_slot")
        if self.max_kicks < 0:
            raise ConfigInvalid("must be >= 0", "hw.max_kicks")
        if self.learn_rate_per_sec <= 0:
            raise ConfigInvalid("must be > 0", "hw.learn_rate_per_sec")
        if self.learn_burst < 1:
            raise ConfigInvalid("must be >= 1", "hw.learn_burst")
        if not 0 < self.degrade_threshold < 1:
            raise ConfigInvalid("must be in (0, 1)", "hw.degrade_threshold")
        if not 0 < self.degrade_floor <= 1:
            raise ConfigInvalid("must be in (0, 1]", "hw.degrade_floor")
        if self.program_latency <= 0:
            raise ConfigInvalid("must be > 0", "hw.program_latency")
        if self.hw_idle_timeout <= 0:
            raise ConfigInvalid("must be > 0", "hw.hw_idle_timeout")
        if self.streams < 1:
            raise ConfigInvalid("must be >= 1", "hw.streams")
        return self

    def scaled(self, factor: float) -> HwConfig:
        """Shrink capacity and learning figures by ``factor`` (desk-scale runs)."""
        return replace(
            self,
            capacity=max(1, round(self.capacity * factor)),
            learn_rate_per_sec=self.learn_rate_per_sec * factor,
            learn_burst=max(1, round(self.learn_burst * factor)),
        )


def nt200a02(streams: int = 1) -> HwConfig:
    """Published figures of the evaluated adapter.

    One stream learns up to 1M flows/s, several streams up to 3M flows/s
    (another passage quotes about 3.5M; the lower figure is used).
    """
    return HwConfig(
        capacity=140_000_000,
        learn_rate_per_sec=1_000_000.0 if streams == 1 else 3_000_000.0,
        learn_burst=100_000,
        streams=streams,
    )


PRESETS = {"desk": HwConfig, "nt200a02": nt200a02}


def _mix64(x: int) -> int:
    x &= _M64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _M64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def key_hash(key: FlowKey, seed: int) -> int:
    """64-bit hash of the packed key fields under ``seed``."""
    vlan = 0 if key.vlan is None else 0x1000 | key.vlan
    lo = (key.src_addr << 32) | key.dst_addr
    hi = (key.proto << 45) | (vlan << 32) | (key.src_port << 16) | key.dst_port
    return _mix64(_mix64(lo ^ seed) ^ hi)


class CuckooTable:
    """Bucketized cuckoo hash with two candidate slots per key.

    Slots are allocated lazily so a 140M-entry geometry costs nothing until
    it is used. A failed insert rolls every displacement back, so the table
    is unchanged when ``insert`` returns False.
    """

    def __init__(
        self,
        capacity: int,
        buckets_per_slot: int = 4,
        max_kicks: int = 32,
        seeds: tuple[int, int] = HwConfig.hash_seeds,
        rng_seed: int = 0,
    ):
        self.capacity = capacity
        self.buckets_per_slot = buckets_per_slot
        self.max_kicks = max_kicks
        self.n_slots = max(1, math.ceil(capacity / buckets_per_slot))
        self.seeds = seeds
        self._slots: dict[int, list[list[Any]]] = {}
        self._rng = random.Random(rng_seed)
        self.occupancy = 0

    def __len__(self) -> int:
        return self.occupancy

    @property
    def load_factor(self) -> float:
        return self.occupancy / self.capacity

    def candidate_slots(self, key: FlowKey) -> tuple[int, int]:
        a = key_hash(key, self.seeds[0]) % self.n_slots
        b = key_hash(key, self.seeds[1]) % self.n_slots
        return a, b

    def lookup(self, key: FlowKey) -> Any | None:
        for idx in self.candidate_slots(key):
            slot = self._slots.get(idx)
            if slot:
                for k, v in slot:
                    if k == key:
                        return v
        return None

    def __contains__(self, key: FlowKey) -> bool:
        return self.lookup(key) is not None

    def _slot(self, idx: int) -> list[list[Any]]:
        slot = self._slots.get(idx)
        if slot is None:
            slot = self._slots[idx] = []
        return slot

    def insert(self, key: FlowKey, value: Any) -> bool:
        if self.occupancy >= self.capacity:
            return False
        a, b = self.candidate_slots(key)
        for idx in (a, b):
            slot = self._slot(idx)
            if len(slot) < self.buckets_per_slot:
                slot.append([key, value])
                self.occupancy += 1
                return True

        # random walk; each step records (slot, position, evicted item)
        path = []
        item = [key, value]
        idx = self._rng.choice((a, b))
        for _ in range(self.max_kicks):
            slot = self._slot(idx)
            pos = self._rng.randrange(len(slot))
            victim = slot[pos]
            slot[pos] = item
            path.append((idx, pos, victim))
            va, vb = self.candidate_slots(victim[0])
            idx = vb if idx == va else va
            dest = self._slot(idx)
            if len(dest) < self.buckets_per_slot:
                dest.append(victim)
                self.occupancy += 1
                return True
            item = victim
        for idx, pos, victim in reversed(path):
            self._slots[idx][pos] = victim
        return False

    def remove(self, key: FlowKey) -> Any | None:
        for idx in self.candidate_slots(key):
            slot = self._slots.get(idx)
            if not slot:
                continue
            for pos, (k, v) in enumerate(slot):
                if k == key:
                    del slot[pos]
                    if not slot:
                        del self._slots[idx]
                    self.occupancy -= 1
                    return v
        return None

    def items(self):
        for slot in self._slots.values():
            for k, v in slot:
                yield k, v


@dataclass(slots=True, eq=False)
class HwFlowEntry:
    key: FlowKey
    flow_id: int
    action: FlowAction
    last_seen: SimTime
    programmed_at: SimTime
    hw_packets: int = 0
    hw_bytes: int = 0


class ProgramRequest(NamedTuple):
    key: FlowKey
    flow_id: int
    action: FlowAction
    submitted_at: SimTime


class EventReason(Enum):
    IDLE_TIMEOUT = "IdleTimeout"
    EVICTED = "Evicted"


class FlowEvent(NamedTuple):
    """Purge notification.

    ``key`` lets a multi-worker host route the event to the owning worker;
    ``last_seen`` is the time of the last packet the hardware handled.
    """

    flow_id: int
    hw_packets: int
    hw_bytes: int
    purged_at: SimTime
    reason: EventReason
    key: FlowKey
    last_seen: SimTime = 0
    kind: str = "Purged"


class HwDecision(NamedTuple):
    kind: ActionKind
    flow_id: int = 0
    egress: int | None = None


TO_HOST_UNCLASSIFIED = HwDecision(ActionKind.TO_HOST, 0)


@dataclass
class TickResult:
    programmed: list[ProgramRequest] = field(default_factory=list)
    events: list[FlowEvent] = field(default_factory=list)
    rejected: list[ProgramRequest] = field(default_factory=list)


def degrade_multiplier(occupancy: float, threshold: float, floor: float) -> float:
    """Learning-rate multiplier: 1 up to ``threshold``, linear down to ``floor`` at full."""
    if occupancy <= threshold:
        return 1.0
    frac = min(1.0, (occupancy - threshold) / (1.0 - threshold))
    return 1.0 - frac * (1.0 - floor)


class HwFlowManager:
    """The emulated NIC flow manager.

    ``submit`` only appends to the programming queue. ``tick`` advances the
    device clock: it refills the learning bucket, programs ready requests
    and purges idle entries. ``process_packet`` is the per-packet fast path.
    """

    def __init__(self, config: HwConfig | None = None, ports=None):
        self.config = config = (config or HwConfig()).validate()
        self.table = CuckooTable(
            config.capacity, config.buckets_per_slot, config.max_kicks, tuple(config.hash_seeds)
        )
        self.ports = None if ports is None else frozenset(ports) | {ANALYTICS_PORT}
        self.queue: deque[ProgramRequest] = deque()
        # hardware aging list, oldest last_seen first
        self._aging: OrderedDict[FlowKey, HwFlowEntry] = OrderedDict()
        self._credit = config.learn_burst * _TOKEN
        self._last_tick: SimTime | None = None
        self.inserts = 0
        self.purges = 0
        self.duplicate_programs = 0
        self.table_full_rejects = 0
        self.handled_packets = 0

    @property
    def occupancy(self) -> int:
        return self.table.occupancy

    @property
    def occupancy_fraction(self) -> float:
        return self.table.occupancy / self.config.capacity

    @property
    def tokens(self) -> float:
        return self._credit / _TOKEN

    def rate_multiplier(self) -> float:
        c = self.config
        return degrade_multiplier(self.occupancy_fraction, c.degrade_threshold, c.degrade_floor)

    def submit(self, req: ProgramRequest) -> None:
        if req.flow_id == 0:
            raise ZeroFlowId(f"program request for {req.key} has flow id 0")
        if req.action.kind is ActionKind.TO_HOST:
            raise ValueError("hardware entries never forward to host")
        if (
            self.ports is not None
            and req.action.kind is ActionKind.PASS
            and req.action.port not in self.ports
        ):
            raise ValueError(f"egress port {req.action.port} is not configured")
        self.queue.append(req)

    def tick(self, now: SimTime) -> TickResult:
        c = self.config
        if self._last_tick is not None:
            if now < self._last_tick:
                raise ValueError("device clock moved backwards")
            elapsed = now - self._last_tick
            gain = elapsed * c.learn_rate_per_sec
            mult = self.rate_multiplier()
            if mult != 1.0:
                gain *= mult
            self._credit = min(c.learn_burst * _TOKEN, self._credit + round(gain))
        self._last_tick = now

        result = TickResult()
        queue = self.queue
        while queue and self._credit >= _TOKEN:
            req = queue[0]
            if req.submitted_at + c.program_latency > now:
                break
            queue.popleft()
            if self.table.lookup(req.key) is not None:
                self.duplicate_programs += 1
                continue
            entry = HwFlowEntry(req.key, req.flow_id, req.action, last_seen=now, programmed_at=now)
            self._credit -= _TOKEN
            if not self.table.insert(req.key, entry):
                self.table_full_rejects += 1
                result.rejected.append(req)
                continue
            self.inserts += 1
            self._aging[req.key] = entry
            result.programmed.append(req)

        aging = self._aging
        while aging:
            key, entry = next(iter(aging.items()))
            if now - entry.last_seen <= c.hw_idle_timeout:
                break
            result.events.append(self._purge(entry, now, EventReason.IDLE_TIMEOUT))
        return result

    def _purge(self, entry: HwFlowEntry, now: SimTime, reason: EventReason) -> FlowEvent:
        self.table.remove(entry.key)
        del self._aging[entry.key]
        self.purges += 1
        return FlowEvent(
            entry.flow_id, entry.hw_packets, entry.hw_bytes, now, reason, entry.key, entry.last_seen
        )

    def flush(self, now: SimTime) -> list[FlowEvent]:
        """Evict every entry and drop pending requests (device shutdown)."""
        events = [self._purge(e, now, EventReason.EVICTED) for e in list(self._aging.values())]
        self.queue.clear()
        return events

    def process_packet(self, pkt: Packet, now: SimTime | None = None) -> HwDecision:
        entry = self.table.lookup(pkt.key)
        if entry is None:
            return TO_HOST_UNCLASSIFIED
        entry.hw_packets += 1
        entry.hw_bytes += pkt.wire_len
        entry.last_seen = pkt.ts if now is None else now
        self._aging.move_to_end(pkt.key)
        self.handled_packets += 1
        action = entry.action
        if action.kind is ActionKind.PASS:
            return HwDecision(ActionKind.PASS, entry.flow_id, action.port)
        return HwDecision(ActionKind.DROP, entry.flow_id)

    def entries(self):
        return [v for _, v in self.table.items()]
