"""Deterministic synthetic traffic in the style of a software packet blaster.

A scenario fixes the number of concurrently active flows, the flow birth
rate, the packet size and the offered load. Flows are born at a constant
pace (the active population ramps up from zero, nothing is preallocated),
each lives ``active_flows / new_flows_per_sec`` seconds and spreads its
packets evenly over that lifetime.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, NamedTuple

from .errors import ConfigInvalid, ParseError
from .flow_core import (
    NS_PER_MS,
    NS_PER_SEC,
    RANDOM,
    TCP,
    UDP,
    FlowKey,
    Packet,
    SimTime,
    format_addr,
    make_flow_key,
)
from .hw import HwConfig
from .probe import ProbeConfig

WIRE_OVERHEAD = 24
MIN_PACKET_SIZE = 60
MAX_PACKET_SIZE = 9000
# 64-byte frames plus 20 bytes of preamble and inter-frame gap at 100 Gbps
MAX_PPS = 100e9 / ((64 + 20) * 8)


def packets_per_second(rate_bits_per_sec: float, packet_size: int, overhead: int = WIRE_OVERHEAD) -> float:
    return rate_bits_per_sec / ((packet_size + overhead) * 8)


@dataclass
class ScenarioConfig:
    """Experiment parameters.

    Flow counts, birth rate and packet rate are given at full scale and
    multiplied by ``scale_factor`` when the schedule is built. Give the load
    either as ``rate_bits_per_sec`` or directly as ``packets_per_sec``.
    """

    active_flows: float = 10_000.0
    new_flows_per_sec: float = 1_000.0
    packet_size: int = 970
    rate_bits_per_sec: float | None = 80e9
    packets_per_sec: float | None = None
    duration: SimTime = 20 * NS_PER_SEC
    l7_mix: dict[str, float] = field(default_factory=lambda: {RANDOM: 1.0})
    seed: int = 0
    scale_factor: float = 1e-3
    wire_overhead: int = WIRE_OVERHEAD
    ingress_ports: int = 1
    min_flow_lifetime: SimTime = NS_PER_MS
    max_dpi_packets: int = 8
    scratch_bytes: int = 1024
    dissectors: list | None = None
    hw: HwConfig = field(default_factory=HwConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def full_scale_pps(self) -> float:
        if self.packets_per_sec is not None:
            return self.packets_per_sec
        return packets_per_second(self.rate_bits_per_sec, self.packet_size, self.wire_overhead)

    @property
    def pps(self) -> float:
        return self.full_scale_pps * self.scale_factor

    @property
    def flows(self) -> float:
        return self.active_flows * self.scale_factor

    @property
    def births(self) -> float:
        return self.new_flows_per_sec * self.scale_factor

    def validate(self) -> ScenarioConfig:
        if not MIN_PACKET_SIZE <= self.packet_size <= MAX_PACKET_SIZE:
            raise ConfigInvalid(
                f"must be in [{MIN_PACKET_SIZE}, {MAX_PACKET_SIZE}], got {self.packet_size}",
                "packet_size",
            )
        if (self.rate_bits_per_sec is None) == (self.packets_per_sec is None):
            raise ConfigInvalid("give exactly one of rate_bits_per_sec, packets_per_sec", "rate_bits_per_sec")
        if self.full_scale_pps <= 0:
            raise ConfigInvalid("offered load must be positive", "rate_bits_per_sec")
        if self.full_scale_pps > MAX_PPS * (1 + 1e-9):
            raise ConfigInvalid(
                f"{self.full_scale_pps / 1e6:.1f} Mpps exceeds the 148.8 Mpps line-rate ceiling",
                "rate_bits_per_sec",
            )
        if self.scale_factor <= 0:
            raise ConfigInvalid("must be > 0", "scale_factor")
        if self.active_flows <= 0:
            raise ConfigInvalid("must be > 0", "active_flows")
        if self.new_flows_per_sec <= 0:
            raise ConfigInvalid("must be > 0", "new_flows_per_sec")
        if self.duration <= 0:
            raise ConfigInvalid("must be > 0", "duration")
        if self.flows / self.births * NS_PER_SEC < self.min_flow_lifetime:
            raise ConfigInvalid(
                "birth rate too high for the active population (lifetime below minimum)",
                "new_flows_per_sec",
            )
        if not self.l7_mix or any(v < 0 for v in self.l7_mix.values()):
            raise ConfigInvalid("fractions must be non-negative", "l7_mix")
        if abs(sum(self.l7_mix.values()) - 1.0) > 1e-9:
            raise ConfigInvalid("fractions must sum to 1", "l7_mix")
        if self.ingress_ports not in (1, 2):
            raise ConfigInvalid("must be 1 or 2", "ingress_ports")
        self.hw.validate()
        self.probe.validate()
        return self


class FlowSpec(NamedTuple):
    key: FlowKey
    birth: SimTime
    packets: int
    gap: float  # nanoseconds, may be fractional
    payload_class: str
    ingress_port: int

    def timestamps(self) -> list[SimTime]:
        return [self.birth + round(k * self.gap) for k in range(self.packets)]


@dataclass
class FlowSchedule:
    flows: list[FlowSpec]
    lifetime: SimTime
    packet_size: int
    pps: float
    duration: SimTime

    @property
    def total_packets(self) -> int:
        return sum(f.packets for f in self.flows)


def _draw_keys(rng: random.Random, n: int) -> list[FlowKey]:
    keys: list[FlowKey] = []
    seen: set[FlowKey] = set()
    while len(keys) < n:
        proto = TCP if rng.random() < 0.5 else UDP
        key = make_flow_key(
            proto,
            (10 << 24) | rng.getrandbits(24),
            (10 << 24) | rng.getrandbits(24),
            rng.randint(1024, 65535),
            rng.randint(1, 65535),
        )
        if key not in seen:
            seen.add(key)
            keys.append(key)
    return keys


def build_schedule(config: ScenarioConfig) -> FlowSchedule:
    """Lay out every flow of the scenario.

    Births are evenly paced over ``duration``; flows born late finish their
    lifetime after it, so the realized packet total equals the configured
    rate times ``duration``. Packet counts are split as evenly as integers
    allow.
    """
    config.validate()
    births = config.births
    lifetime = round(config.flows / births * NS_PER_SEC)
    n_flows = round(births * config.duration / NS_PER_SEC)
    if n_flows < 1:
        raise ConfigInvalid("scenario produces no flows; raise duration or scale", "duration")
    budget = round(config.pps * config.duration / NS_PER_SEC)
    if budget < n_flows:
        raise ConfigInvalid("fewer packets than flows; raise the rate", "rate_bits_per_sec")

    rng = random.Random(config.seed)
    keys = _draw_keys(rng, n_flows)
    classes = sorted(config.l7_mix)
    weights = [config.l7_mix[c] for c in classes]
    flows = []
    for i, key in enumerate(keys):
        count = (i + 1) * budget // n_flows - i * budget // n_flows
        flows.append(
            FlowSpec(
                key=key,
                birth=round(i * NS_PER_SEC / births),
                packets=count,
                gap=lifetime / count,
                payload_class=rng.choices(classes, weights)[0],
                ingress_port=i % config.ingress_ports,
            )
        )
    return FlowSchedule(flows, lifetime, config.packet_size, config.pps, config.duration)


def generate_stream(schedule: FlowSchedule) -> list[Packet]:
    """All packets of the schedule, ordered by timestamp then flow order."""
    out = []
    size = schedule.packet_size
    for f in schedule.flows:
        for seq, ts in enumerate(f.timestamps()):
            out.append(Packet(ts, f.key, size, f.ingress_port, f.payload_class, seq))
    out.sort(key=lambda p: p.ts)
    return out


def concurrent_flows(packets: Iterable[Packet], at: SimTime) -> int:
    """Flows whose first packet is at or before ``at`` and last packet after it."""
    first: dict[FlowKey, SimTime] = {}
    last: dict[FlowKey, SimTime] = {}
    for p in packets:
        first.setdefault(p.key, p.ts)
        last[p.key] = p.ts
    return sum(1 for k in first if first[k] <= at < last[k])


TRACE_FIELDS = ("ts_ns", "proto", "src", "dst", "sport", "dport", "len", "l7", "seq", "port", "vlan")


def write_trace(stream: Iterable[Packet], sink: IO[str]) -> int:
    n = 0
    for p in stream:
        k = p.key
        rec = {
            "ts_ns": p.ts,
            "proto": k.proto,
            "src": format_addr(k.src_addr),
            "dst": format_addr(k.dst_addr),
            "sport": k.src_port,
            "dport": k.dst_port,
            "len": p.wire_len,
            "l7": p.payload_class,
            "seq": p.flow_seq,
            "port": p.ingress_port,
        }
        if k.vlan is not None:
            rec["vlan"] = k.vlan
        sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
        n += 1
    return n


def iter_trace(source: IO[str]) -> Iterator[Packet]:
    for lineno, line in enumerate(source, 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            key = make_flow_key(r["proto"], r["src"], r["dst"], r["sport"], r["dport"], r.get("vlan"))
            pkt = Packet(r["ts_ns"], key, r["len"], r.get("port", 0), r["l7"], r["seq"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"{type(exc).__name__}: {exc}", lineno) from None
        if not isinstance(pkt.ts, int) or pkt.ts < 0 or pkt.wire_len < MIN_PACKET_SIZE:
            raise ParseError("bad timestamp or length", lineno)
        yield pkt


def read_trace(source: IO[str]) -> list[Packet]:
    return list(iter_trace(source))
