"""Tick-driven scenario driver tying generator, NIC emulation and probe together."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import IO, Sequence

from .dpi import DissectorSpec, DpiEngine
from .errors import InvariantViolation
from .flow_core import Packet
from .hw import TO_HOST_UNCLASSIFIED, HwFlowManager
from .probe import Exporter, Metrics, Probe
from .traffic import ScenarioConfig, build_schedule, generate_stream

log = logging.getLogger(__name__)


def make_engine(config: ScenarioConfig) -> DpiEngine | None:
    if not config.probe.dpi_enabled:
        return None
    kwargs = dict(max_dpi_packets=config.max_dpi_packets, scratch_bytes=config.scratch_bytes)
    if config.dissectors is None:
        return DpiEngine.with_defaults(**kwargs)
    engine = DpiEngine(**kwargs)
    for spec in config.dissectors:
        engine.register(spec if isinstance(spec, DissectorSpec) else DissectorSpec(**spec))
    return engine


@dataclass
class RunResult:
    metrics: Metrics
    probe: Probe
    hw: HwFlowManager | None
    packets: Sequence[Packet]


def simulate(
    config: ScenarioConfig,
    packets: Sequence[Packet] | None = None,
    sink: IO[str] | None = None,
    check_every: int = 0,
) -> RunResult:
    """Run one scenario and keep the component objects for inspection.

    ``packets`` replaces the generated stream (e.g. a replayed trace).
    ``check_every`` > 0 verifies the host/hardware sync invariant every that
    many ticks; conservation and single-offload are always verified at the end.
    """
    config.validate()
    if packets is None:
        packets = generate_stream(build_schedule(config))
    pc = config.probe
    hw = HwFlowManager(config.hw, ports=pc.ports) if pc.offload_enabled else None
    probe = Probe(pc, make_engine(config), hw, Exporter(sink, pc.export_batch))
    m = probe.metrics
    budget = pc.host_budget_units_per_tick

    tick = pc.tick
    end = config.duration
    if packets:
        end = max(end, packets[-1].ts + 1)
    n = len(packets)
    i = 0
    t0 = 0
    ticks = 0
    while t0 < end:
        t1 = t0 + tick
        while i < n and packets[i].ts < t1:
            pkt = packets[i]
            decision = hw.process_packet(pkt) if hw is not None else TO_HOST_UNCLASSIFIED
            probe.ingest(decision, pkt)
            i += 1
        units = probe.step(t0, t1)
        inserts_before = hw.inserts if hw is not None else 0
        if hw is not None:
            probe.on_tick(hw.tick(t1))
        probe.expire(t1)

        m.cpu_load.append(units / budget if budget else 0.0)
        m.hw_occupancy.append(hw.occupancy_fraction if hw is not None else 0.0)
        m.prog_queue_depth.append(len(hw.queue) if hw is not None else 0)
        m.drops_cum.append(m.dropped)
        m.inserts_per_tick.append(hw.inserts - inserts_before if hw is not None else 0)
        ticks += 1
        if check_every and ticks % check_every == 0:
            probe.check_sync()
        t0 = t1

    probe.shutdown(t0)
    if hw is not None:
        m.duplicate_programs = hw.duplicate_programs
        m.hw_table_full_rejects = hw.table_full_rejects
        m.hw_inserts = hw.inserts
        m.hw_purges = hw.purges
        if hw.handled_packets != m.hw_handled_packets:
            raise InvariantViolation("hardware and probe disagree on handled packets")
    probe.check_final()
    log.info(
        "scenario done: %d packets, drop %.2f%%, host %.1f%%",
        m.generated_packets,
        100 * m.drop_pct,
        100 * m.host_fraction,
    )
    return RunResult(m, probe, hw, packets)


def run_scenario(config: ScenarioConfig, sink: IO[str] | None = None, check_every: int = 0) -> Metrics:
    return simulate(config, sink=sink, check_every=check_every).metrics
