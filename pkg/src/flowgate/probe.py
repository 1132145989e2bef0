"""The software probe: RSS dispatch, per-worker flow caches, DPI-gated
offload, purge-event consumption and batched flow export.

A worker only ever touches its own :class:`~flowgate.flow_core.FlowTable`.
The hardware manager and the exporter are the shared boundaries.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from functools import lru_cache
from typing import IO, Iterable

from .dpi import DpiEngine, Verdict
from .errors import ConfigInvalid, InvariantViolation, SinkWriteError, TableFull
from .flow_core import (
    NS_PER_MS,
    NS_PER_SEC,
    UNKNOWN,
    FlowKey,
    FlowTable,
    HostFlowEntry,
    OffloadState,
    Packet,
    SimTime,
    format_addr,
    make_flow_key,
)
from .hw import (
    ANALYTICS_PORT,
    ActionKind,
    FlowAction,
    FlowEvent,
    HwDecision,
    HwFlowManager,
    ProgramRequest,
    TickResult,
)

log = logging.getLogger(__name__)


class Mode(Enum):
    PASSIVE = "passive"
    INLINE_UNI = "inline_uni"
    INLINE_BI = "inline_bi"


@dataclass
class PolicyRule:
    """Match on any subset of L7 label and header fields; None is a wildcard."""

    action: str = "pass"
    priority: int = 0
    l7: str | None = None
    proto: int | None = None
    src_port: int | None = None
    dst_port: int | None = None

    def __post_init__(self):
        if self.action not in ("pass", "drop", "host"):
            raise ConfigInvalid(f"unknown action {self.action!r}", "policy.action")

    def matches(self, entry: HostFlowEntry) -> bool:
        k = entry.key
        return (
            (self.l7 is None or self.l7 == entry.l7)
            and (self.proto is None or self.proto == k.proto)
            and (self.src_port is None or self.src_port == k.src_port)
            and (self.dst_port is None or self.dst_port == k.dst_port)
        )


@dataclass
class ProbeConfig:
    mode: Mode = Mode.PASSIVE
    workers: int = 1
    host_queue_depth: int = 1024
    host_budget_units_per_tick: float = 1000.0
    cost_base: int = 1
    cost_dpi: int = 3
    # host memory model; all zero disables it
    cost_new_flow: float = 0.0
    cost_miss: float = 0.0
    cache_bytes_per_worker: int = 0
    entry_bytes: int = 256
    dpi_enabled: bool = True
    offload_enabled: bool = True
    policy: list[PolicyRule] = field(default_factory=list)
    export_batch: int = 64
    tick: SimTime = NS_PER_MS
    idle_timeout: SimTime = 30 * NS_PER_SEC
    max_entries: int = 1 << 20

    def validate(self) -> ProbeConfig:
        if isinstance(self.mode, str):
            try:
                self.mode = Mode(self.mode)
            except ValueError:
                raise ConfigInvalid(f"unknown mode {self.mode!r}", "probe.mode") from None
        if self.workers < 1:
            raise ConfigInvalid("must be >= 1", "probe.workers")
        if not self.cost_dpi >= self.cost_base >= 1:
            raise ConfigInvalid("need cost_dpi >= cost_base >= 1", "probe.cost_base")
        if self.host_queue_depth < 0:
            raise ConfigInvalid("must be >= 0", "probe.host_queue_depth")
        if self.host_budget_units_per_tick < 0:
            raise ConfigInvalid("must be >= 0", "probe.host_budget_units_per_tick")
        if self.cost_new_flow < 0 or self.cost_miss < 0:
            raise ConfigInvalid("costs must be >= 0", "probe.cost_miss")
        if self.export_batch < 1:
            raise ConfigInvalid("must be >= 1", "probe.export_batch")
        if self.tick <= 0:
            raise ConfigInvalid("must be > 0", "probe.tick")
        if self.idle_timeout <= 0:
            raise ConfigInvalid("must be > 0", "probe.idle_timeout")
        if self.max_entries < 1:
            raise ConfigInvalid("must be >= 1", "probe.max_entries")
        return self

    @property
    def ports(self) -> frozenset[int]:
        if self.mode is Mode.PASSIVE:
            return frozenset()
        return frozenset((0, 1))


def egress_for(mode: Mode, ingress_port: int) -> int:
    if mode is Mode.PASSIVE:
        return ANALYTICS_PORT
    if mode is Mode.INLINE_UNI:
        return 1
    return 1 if ingress_port == 0 else 0


def evaluate_policy(policy: Iterable[PolicyRule], entry: HostFlowEntry, mode: Mode) -> FlowAction:
    """Action of the highest-priority matching rule (list order breaks ties).

    Without a matching rule flows pass. In passive mode pass and drop both
    become count-only entries on the analytics port.
    """
    chosen = "pass"
    for rule in sorted(policy, key=lambda r: -r.priority):
        if rule.matches(entry):
            chosen = rule.action
            break
    if chosen == "host":
        return FlowAction.to_host()
    if mode is Mode.PASSIVE:
        return FlowAction.pass_to(ANALYTICS_PORT)
    if chosen == "drop":
        return FlowAction.drop()
    return FlowAction.pass_to(egress_for(mode, entry.ingress_port))


# Microsoft's reference RSS key (40 bytes)
RSS_KEY = bytes.fromhex(
    "6d5a56da255b0ec24167253d43a38fb0d0ca2bcbae7b30b477cb2da38030f20c6a42b73bbeac01fa"
)


def toeplitz_hash(data: bytes, key: bytes = RSS_KEY) -> int:
    key_int = int.from_bytes(key, "big")
    key_bits = len(key) * 8
    result = 0
    for i, byte in enumerate(data):
        for b in range(8):
            if byte & (0x80 >> b):
                shift = key_bits - 32 - (i * 8 + b)
                result ^= (key_int >> shift) & 0xFFFFFFFF
    return result


@lru_cache(maxsize=1 << 16)
def _rss_hash(key: FlowKey) -> int:
    data = (
        key.src_addr.to_bytes(4, "big")
        + key.dst_addr.to_bytes(4, "big")
        + key.src_port.to_bytes(2, "big")
        + key.dst_port.to_bytes(2, "big")
    )
    return toeplitz_hash(data)


def rss_dispatch(pkt: Packet | FlowKey, workers: int) -> int:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        return 0
    key = pkt.key if isinstance(pkt, Packet) else pkt
    return _rss_hash(key) % workers


class EndReason(Enum):
    HOST_TIMEOUT = "HostTimeout"
    HW_PURGE = "HwPurge"
    SHUTDOWN = "Shutdown"


@dataclass(frozen=True)
class ExportRecord:
    key: FlowKey
    l7: str
    total_packets: int
    total_bytes: int
    first_seen: SimTime
    last_seen: SimTime
    end_reason: EndReason

    @classmethod
    def from_entry(cls, entry: HostFlowEntry, reason: EndReason) -> ExportRecord:
        return cls(
            entry.key,
            entry.l7,
            entry.total_packets,
            entry.total_bytes,
            entry.first_seen,
            entry.last_seen,
            reason,
        )

    def to_dict(self) -> dict:
        k = self.key
        key = {
            "proto": k.proto,
            "src": format_addr(k.src_addr),
            "dst": format_addr(k.dst_addr),
            "sport": k.src_port,
            "dport": k.dst_port,
        }
        if k.vlan is not None:
            key["vlan"] = k.vlan
        return {
            "key": key,
            "l7": self.l7,
            "packets": self.total_packets,
            "bytes": self.total_bytes,
            "first_seen_ns": self.first_seen,
            "last_seen_ns": self.last_seen,
            "end_reason": self.end_reason.value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> ExportRecord:
        k = d["key"]
        key = make_flow_key(k["proto"], k["src"], k["dst"], k["sport"], k["dport"], k.get("vlan"))
        return cls(
            key,
            d["l7"],
            d["packets"],
            d["bytes"],
            d["first_seen_ns"],
            d["last_seen_ns"],
            EndReason(d["end_reason"]),
        )


class Exporter:
    """Shared export queue; records are written as JSON lines in batches."""

    def __init__(self, sink: IO[str] | None = None, batch: int = 64):
        self.sink = sink
        self.batch = batch
        self.pending: list[ExportRecord] = []
        self.records = 0
        self.bytes_written = 0

    def add(self, record: ExportRecord) -> None:
        self.pending.append(record)
        self.records += 1
        if len(self.pending) >= self.batch:
            self.flush()

    def flush(self) -> int:
        batch, self.pending = self.pending, []
        return self.export_flush(batch)

    def export_flush(self, batch: list[ExportRecord]) -> int:
        if not batch or self.sink is None:
            return 0
        data = "".join(r.to_json() + "\n" for r in batch)
        try:
            self.sink.write(data)
        except (OSError, ValueError) as exc:
            raise SinkWriteError(str(exc)) from exc
        n = len(data.encode())
        self.bytes_written += n
        return n


def read_exports(lines: Iterable[str]) -> list[ExportRecord]:
    return [ExportRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


@dataclass
class Metrics:
    generated_packets: int = 0
    host_processed_packets: int = 0
    hw_handled_packets: int = 0
    dropped_queue_full: int = 0
    dropped_table_full: int = 0
    residual_queued: int = 0
    duplicate_programs: int = 0
    hw_table_full_rejects: int = 0
    program_requests: int = 0
    hw_inserts: int = 0
    hw_purges: int = 0
    orphan_events: int = 0
    flows_created: int = 0
    exports: int = 0
    egress_hw: int = 0
    egress_sw: int = 0
    policy_drops_hw: int = 0
    policy_drops_sw: int = 0
    cpu_load: list[float] = field(default_factory=list)
    hw_occupancy: list[float] = field(default_factory=list)
    prog_queue_depth: list[int] = field(default_factory=list)
    drops_cum: list[int] = field(default_factory=list)
    inserts_per_tick: list[int] = field(default_factory=list)

    SERIES = ("cpu_load", "hw_occupancy", "prog_queue_depth", "drops_cum", "inserts_per_tick")

    @property
    def dropped(self) -> int:
        return self.dropped_queue_full + self.dropped_table_full

    @property
    def drop_pct(self) -> float:
        return self.dropped / self.generated_packets if self.generated_packets else 0.0

    @property
    def host_fraction(self) -> float:
        return self.host_processed_packets / self.generated_packets if self.generated_packets else 0.0

    @property
    def hw_fraction(self) -> float:
        return self.hw_handled_packets / self.generated_packets if self.generated_packets else 0.0

    @property
    def mean_cpu_load(self) -> float:
        return sum(self.cpu_load) / len(self.cpu_load) if self.cpu_load else 0.0

    @property
    def occupancy_peak(self) -> float:
        return max(self.hw_occupancy, default=0.0)

    @property
    def backlog_peak(self) -> int:
        return max(self.prog_queue_depth, default=0)

    def accounted(self) -> int:
        return (
            self.host_processed_packets
            + self.hw_handled_packets
            + self.dropped_queue_full
            + self.dropped_table_full
            + self.residual_queued
        )

    def summary(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in self.SERIES}
        out.update(
            drop_pct=self.drop_pct,
            host_fraction=self.host_fraction,
            hw_fraction=self.hw_fraction,
            mean_cpu_load=self.mean_cpu_load,
            occupancy_peak=self.occupancy_peak,
            backlog_peak=self.backlog_peak,
            ticks=len(self.cpu_load),
        )
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    def write_series_csv(self, fh: IO[str]) -> None:
        fh.write("tick_index,cpu_load,hw_occupancy,prog_queue_depth,drops_cum\n")
        for i, row in enumerate(
            zip(self.cpu_load, self.hw_occupancy, self.prog_queue_depth, self.drops_cum)
        ):
            fh.write(f"{i},{row[0]!r},{row[1]!r},{row[2]},{row[3]}\n")


class Disposition(Enum):
    ENQUEUED = "Enqueued"
    DROPPED_QUEUE_FULL = "DroppedQueueFull"
    HANDLED_BY_HW = "HandledByHw"


class Worker:
    def __init__(self, index: int, table: FlowTable, depth: int):
        self.index = index
        self.table = table
        self.depth = depth
        self.queue: deque[Packet] = deque()
        self.detecting = 0

    def footprint(self, entry_bytes: int, scratch_bytes: int) -> int:
        return len(self.table) * entry_bytes + self.detecting * scratch_bytes


class Probe:
    def __init__(
        self,
        config: ProbeConfig,
        engine: DpiEngine | None = None,
        hw: HwFlowManager | None = None,
        exporter: Exporter | None = None,
    ):
        self.config = config.validate()
        if config.dpi_enabled and engine is None:
            engine = DpiEngine.with_defaults()
        self.engine = engine
        self.hw = hw if config.offload_enabled else None
        self.exporter = exporter or Exporter(batch=config.export_batch)
        self.metrics = Metrics()
        self.workers = [
            Worker(i, FlowTable(config.idle_timeout, config.max_entries), config.host_queue_depth)
            for i in range(config.workers)
        ]

    def worker_for(self, key: FlowKey) -> Worker:
        return self.workers[rss_dispatch(key, len(self.workers))]

    # -- packet path -------------------------------------------------------

    def ingest(self, decision: HwDecision, pkt: Packet) -> Disposition:
        m = self.metrics
        m.generated_packets += 1
        if decision.kind is not ActionKind.TO_HOST:
            m.hw_handled_packets += 1
            if decision.kind is ActionKind.DROP:
                m.policy_drops_hw += 1
            elif decision.egress != ANALYTICS_PORT:
                m.egress_hw += 1
            return Disposition.HANDLED_BY_HW
        worker = self.worker_for(pkt.key)
        if len(worker.queue) >= worker.depth:
            m.dropped_queue_full += 1
            return Disposition.DROPPED_QUEUE_FULL
        worker.queue.append(pkt)
        return Disposition.ENQUEUED

    def _cost(self, worker: Worker, entry: HostFlowEntry | None) -> float:
        c = self.config
        detecting = c.dpi_enabled and (entry is None or entry.dpi is not None)
        cost = c.cost_dpi if detecting else c.cost_base
        if entry is None:
            cost += c.cost_new_flow
        if c.cost_miss:
            scratch = self.engine.scratch_bytes if self.engine else 0
            footprint = worker.footprint(c.entry_bytes, scratch)
            if footprint > c.cache_bytes_per_worker:
                cost += c.cost_miss * (1.0 - c.cache_bytes_per_worker / footprint)
        return cost

    def worker_step(self, worker: Worker, budget: float, t0: SimTime, t1: SimTime) -> float:
        """Process queued packets until the next one would exceed ``budget``.

        Work is spread over the tick: a request submitted after consuming
        ``u`` units is stamped ``t0 + u / budget * (t1 - t0)`` (never before
        the packet itself arrived).
        """
        c = self.config
        m = self.metrics
        table = worker.table
        queue = worker.queue
        span = t1 - t0
        units = 0.0
        while queue:
            pkt = queue[0]
            entry = table.get(pkt.key)
            cost = self._cost(worker, entry)
            if units + cost > budget:
                break
            queue.popleft()
            units += cost
            if entry is None:
                try:
                    entry, _ = table.upsert(pkt.key, pkt.ts)
                except TableFull:
                    m.dropped_table_full += 1
                    continue
                table.allocate_flowid(entry)
                entry.ingress_port = pkt.ingress_port
                m.flows_created += 1
                if c.dpi_enabled:
                    entry.dpi = self.engine.new_state()
                    worker.detecting += 1
            table.touch(entry, pkt)
            m.host_processed_packets += 1

            if entry.offload_state is OffloadState.NOT_ELIGIBLE:
                if entry.dpi is not None:
                    verdict = self.engine.feed(entry.dpi, pkt.payload_class)
                    if verdict is not Verdict.DETECTING:
                        entry.l7 = entry.dpi.label
                        entry.dpi = None
                        worker.detecting -= 1
                        self._make_eligible(worker, entry, max(pkt.ts, t0 + round(units / budget * span)))
                elif not c.dpi_enabled and entry.sw_packets >= 2:
                    entry.l7 = UNKNOWN
                    self._make_eligible(worker, entry, max(pkt.ts, t0 + round(units / budget * span)))

            if c.mode is not Mode.PASSIVE:
                action = entry.action
                if action is not None and action.kind is ActionKind.DROP:
                    m.policy_drops_sw += 1
                else:
                    m.egress_sw += 1
        return units

    def _make_eligible(self, worker: Worker, entry: HostFlowEntry, now: SimTime) -> None:
        entry.advance(OffloadState.ELIGIBLE)
        entry.action = evaluate_policy(self.config.policy, entry, self.config.mode)
        if self.hw is None or entry.action.kind is ActionKind.TO_HOST:
            return
        entry.advance(OffloadState.REQUESTED)
        worker.table.hand_to_hardware(entry)
        self.hw.submit(ProgramRequest(entry.key, entry.flow_id, entry.action, now))
        self.metrics.program_requests += 1

    def step(self, t0: SimTime, t1: SimTime) -> float:
        """Run every worker for one tick and return the busy units.

        A worker that still has packets queued was busy for the whole tick,
        even if the next packet's cost did not fit in what was left.
        """
        budget = self.config.host_budget_units_per_tick / len(self.workers)
        busy = 0.0
        for w in self.workers:
            used = self.worker_step(w, budget, t0, t1)
            busy += budget if w.queue else used
        return busy

    # -- hardware feedback ---------------------------------------------------

    def on_tick(self, result: TickResult) -> int:
        for req in result.programmed:
            entry = self.worker_for(req.key).table.resolve_flowid(req.flow_id)
            if entry is not None and entry.offload_state is OffloadState.REQUESTED:
                entry.advance(OffloadState.PROGRAMMED)
        for req in result.rejected:
            worker = self.worker_for(req.key)
            entry = worker.table.resolve_flowid(req.flow_id)
            if entry is not None:
                entry.hw_rejected = True
                worker.table.reclaim_from_hardware(entry)
        return self.consume_flow_events(result.events)

    def consume_flow_events(
        self, events: Iterable[FlowEvent], reason: EndReason = EndReason.HW_PURGE
    ) -> int:
        emitted = 0
        for ev in events:
            table = self.worker_for(ev.key).table
            entry = table.resolve_flowid(ev.flow_id)
            if entry is None:
                self.metrics.orphan_events += 1
                log.warning("purge event for unknown flow id %d", ev.flow_id)
                continue
            entry.hw_packets += ev.hw_packets
            entry.hw_bytes += ev.hw_bytes
            if ev.hw_packets:
                entry.last_seen = max(entry.last_seen, ev.last_seen)
            if entry.offload_state < OffloadState.HW_PURGED:
                entry.offload_state = OffloadState.HW_PURGED
            table.free(entry)
            self._export(entry, reason)
            emitted += 1
        return emitted

    def _export(self, entry: HostFlowEntry, reason: EndReason) -> None:
        self.exporter.add(ExportRecord.from_entry(entry, reason))
        self.metrics.exports += 1

    def expire(self, now: SimTime) -> int:
        n = 0
        for w in self.workers:
            for entry in w.table.expire_scan(now):
                self._release_dpi(w, entry)
                self._export(entry, EndReason.HOST_TIMEOUT)
                n += 1
        return n

    def _release_dpi(self, worker: Worker, entry: HostFlowEntry) -> None:
        if entry.dpi is not None:
            self.engine.release(entry.dpi)
            entry.dpi = None
            worker.detecting -= 1

    def shutdown(self, now: SimTime) -> None:
        if self.hw is not None:
            self.consume_flow_events(self.hw.flush(now), EndReason.SHUTDOWN)
        for w in self.workers:
            for entry in w.table.drain():
                self._release_dpi(w, entry)
                self._export(entry, EndReason.SHUTDOWN)
            self.metrics.residual_queued += len(w.queue)
            w.queue.clear()
        self.exporter.flush()

    # -- invariants ------------------------------------------------------------

    def check_sync(self) -> None:
        if self.hw is None:
            return
        for entry in self.hw.entries():
            host = self.worker_for(entry.key).table.resolve_flowid(entry.flow_id)
            if host is None or host.key != entry.key:
                raise InvariantViolation(f"hardware flow {entry.flow_id} has no host twin")
            if not host.hw_owned:
                raise InvariantViolation(
                    f"hardware flow {entry.flow_id} twin is {host.offload_state.name}"
                )

    def check_final(self) -> None:
        m = self.metrics
        if m.accounted() != m.generated_packets:
            raise InvariantViolation(
                f"conservation: generated {m.generated_packets} != accounted {m.accounted()}"
            )
        if m.duplicate_programs:
            raise InvariantViolation(f"{m.duplicate_programs} duplicate program requests")
        if m.orphan_events:
            raise InvariantViolation(f"{m.orphan_events} orphan purge events")
        if self.engine is not None and self.engine.live_scratch_bytes:
            raise InvariantViolation("DPI scratch memory leaked")
