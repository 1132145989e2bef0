import io
import json
import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgate.dpi import DpiEngine
from flowgate.errors import ConfigInvalid, SinkWriteError, ZeroId
from flowgate.flow_core import NS_PER_MS, NS_PER_US, FlowTable, OffloadState, Packet, make_flow_key
from flowgate.hw import (
    ANALYTICS_PORT,
    TO_HOST_UNCLASSIFIED,
    ActionKind,
    EventReason,
    FlowAction,
    FlowEvent,
    HwConfig,
    HwDecision,
    HwFlowManager,
)
from flowgate.probe import (
    Disposition,
    EndReason,
    Exporter,
    ExportRecord,
    Mode,
    PolicyRule,
    Probe,
    ProbeConfig,
    evaluate_policy,
    read_exports,
    rss_dispatch,
    toeplitz_hash,
)
from flowgate.runner import simulate
from flowgate.traffic import ScenarioConfig, build_schedule


def key(i: int):
    return make_flow_key(6, (10 << 24) + i, "10.200.0.1", 40000, 443)


def feed(probe, hw, packets, t0=0, t1=NS_PER_MS):
    for p in packets:
        d = hw.process_packet(p) if hw is not None else TO_HOST_UNCLASSIFIED
        probe.ingest(d, p)
    return probe.step(t0, t1)


# -- rss ---------------------------------------------------------------------


def test_toeplitz_reference_vector():
    # published RSS verification vector (IPv4 with ports)
    data = bytes([66, 9, 149, 187, 161, 142, 100, 80]) + (2794).to_bytes(2, "big") + (1766).to_bytes(2, "big")
    assert toeplitz_hash(data) == 0x51CCC178


def test_rss_single_worker_and_affinity():
    assert {rss_dispatch(key(i), 1) for i in range(100)} == {0}
    k = key(7)
    assert rss_dispatch(Packet(0, k, 64), 8) == rss_dispatch(Packet(99, k, 1500), 8)


def test_rss_balance_sixteen_workers():
    rng = random.Random(42)
    counts = Counter()
    n = 100_000
    for _ in range(n):
        k = make_flow_key(
            rng.choice((6, 17)), rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(16), rng.getrandbits(16)
        )
        counts[rss_dispatch(k, 16)] += 1
    assert len(counts) == 16
    for c in counts.values():
        assert abs(c / n - 0.0625) <= 0.015


# -- ingest / worker_step ----------------------------------------------------


def test_queue_bound_drops_third_packet():
    probe = Probe(ProbeConfig(host_queue_depth=2, host_budget_units_per_tick=0, offload_enabled=False))
    got = [probe.ingest(TO_HOST_UNCLASSIFIED, Packet(i, key(i), 64)) for i in range(3)]
    assert got == [Disposition.ENQUEUED, Disposition.ENQUEUED, Disposition.DROPPED_QUEUE_FULL]
    assert probe.step(0, NS_PER_MS) == 0
    assert probe.metrics.dropped_queue_full == 1


def test_budget_arithmetic():
    probe = Probe(ProbeConfig(host_budget_units_per_tick=10, dpi_enabled=False, offload_enabled=False))
    units = feed(probe, None, [Packet(i, key(0), 64) for i in range(15)])
    assert units == 10
    assert probe.metrics.host_processed_packets == 10
    assert len(probe.workers[0].queue) == 5


def test_hw_handled_bypasses_host():
    probe = Probe(ProbeConfig())
    d = probe.ingest(HwDecision(ActionKind.PASS, 5, ANALYTICS_PORT), Packet(0, key(0), 64))
    assert d is Disposition.HANDLED_BY_HW
    assert not probe.workers[0].queue
    assert probe.metrics.hw_handled_packets == 1


def test_program_request_on_eighth_packet():
    hw = HwFlowManager(HwConfig())
    probe = Probe(ProbeConfig(), DpiEngine.with_defaults(), hw)
    entry = None
    for i in range(10):
        feed(probe, hw, [Packet(i * NS_PER_MS, key(0), 100)], i * NS_PER_MS, (i + 1) * NS_PER_MS)
        entry = probe.workers[0].table.get(key(0))
        assert probe.metrics.program_requests == (1 if i >= 7 else 0)
        if i == 6:
            assert entry.offload_state is OffloadState.NOT_ELIGIBLE
        if i == 7:
            assert entry.l7 == "Unknown"
            assert entry.offload_state is OffloadState.REQUESTED
        hw.tick((i + 1) * NS_PER_MS)


def test_high_rate_flow_requested_once():
    hw = HwFlowManager(HwConfig())
    probe = Probe(ProbeConfig(), DpiEngine.with_defaults(), hw)
    # 50 packets 100 ns apart: all within the 10 us programming latency
    feed(probe, hw, [Packet(i * 100, key(0), 100) for i in range(50)])
    probe.on_tick(hw.tick(NS_PER_MS))
    assert probe.metrics.program_requests == 1
    assert hw.duplicate_programs == 0
    assert probe.workers[0].table.get(key(0)).offload_state is OffloadState.PROGRAMMED


def test_dpi_off_eligible_at_second_packet():
    hw = HwFlowManager(HwConfig())
    probe = Probe(ProbeConfig(dpi_enabled=False), None, hw)
    feed(probe, hw, [Packet(0, key(0), 100)])
    assert probe.metrics.program_requests == 0
    feed(probe, hw, [Packet(1, key(0), 100)])
    assert probe.metrics.program_requests == 1


def test_host_action_is_never_offloaded():
    hw = HwFlowManager(HwConfig())
    probe = Probe(ProbeConfig(dpi_enabled=False, policy=[PolicyRule("host")]), None, hw)
    feed(probe, hw, [Packet(i, key(0), 100) for i in range(5)])
    assert probe.metrics.program_requests == 0
    assert not hw.queue


def test_offload_disabled_never_touches_hardware():
    m = simulate(_small(offload=False)).metrics
    assert m.hw_handled_packets == 0
    assert m.host_fraction + m.drop_pct + m.residual_queued / m.generated_packets == pytest.approx(1.0)


# -- policy --------------------------------------------------------------------

ONLY_SPOTIFY = [PolicyRule("pass", priority=10, l7="Spotify"), PolicyRule("drop", priority=0)]


def _entry(l7, port=0):
    t = FlowTable()
    e, _ = t.upsert(key(0), 0)
    e.l7 = l7
    e.ingress_port = port
    return e


def test_policy_examples():
    assert evaluate_policy(ONLY_SPOTIFY, _entry("Spotify"), Mode.INLINE_UNI) == FlowAction.pass_to(1)
    assert evaluate_policy(ONLY_SPOTIFY, _entry("Unknown"), Mode.INLINE_UNI) == FlowAction.drop()
    assert evaluate_policy([], _entry("Unknown"), Mode.INLINE_UNI) == FlowAction.pass_to(1)
    assert evaluate_policy([], _entry("Unknown"), Mode.PASSIVE) == FlowAction.pass_to(ANALYTICS_PORT)
    assert evaluate_policy(ONLY_SPOTIFY, _entry("Unknown"), Mode.PASSIVE) == FlowAction.pass_to(ANALYTICS_PORT)


def test_policy_bidirectional_egress():
    assert evaluate_policy([], _entry("x", port=1), Mode.INLINE_BI) == FlowAction.pass_to(0)
    assert evaluate_policy([], _entry("x", port=0), Mode.INLINE_BI) == FlowAction.pass_to(1)


def test_policy_header_match_and_priority_order():
    rules = [PolicyRule("drop", priority=1, dst_port=443), PolicyRule("pass", priority=5, proto=17)]
    assert evaluate_policy(rules, _entry("x"), Mode.INLINE_UNI) == FlowAction.drop()
    with pytest.raises(ConfigInvalid):
        PolicyRule("reject")


# -- purge events / export ---------------------------------------------------


def _offloaded_probe(n_sw=8):
    hw = HwFlowManager(HwConfig(hw_idle_timeout=NS_PER_MS))
    probe = Probe(ProbeConfig(), DpiEngine.with_defaults(), hw, Exporter(io.StringIO(), batch=1))
    feed(probe, hw, [Packet(i, key(0), 100) for i in range(n_sw)])
    probe.on_tick(hw.tick(NS_PER_MS))
    return probe, hw


def test_purge_event_exports_and_frees():
    probe, hw = _offloaded_probe()
    feed(probe, hw, [Packet(NS_PER_MS + i, key(0), 100) for i in range(5)], NS_PER_MS, 2 * NS_PER_MS)
    assert probe.metrics.hw_handled_packets == 5
    events = hw.tick(5 * NS_PER_MS).events
    assert probe.consume_flow_events(events) == 1
    rec = read_exports(probe.exporter.sink.getvalue().splitlines())
    assert len(rec) == 1
    assert rec[0].total_packets == 8 + 5
    assert rec[0].total_bytes == 1300
    assert rec[0].end_reason is EndReason.HW_PURGE
    assert rec[0].last_seen == NS_PER_MS + 4
    assert probe.metrics.orphan_events == 0
    assert key(0) not in probe.workers[0].table
    # the same event again is an orphan
    probe.consume_flow_events(events)
    assert probe.metrics.orphan_events == 1


def test_zero_id_event_is_protocol_error():
    probe, _ = _offloaded_probe()
    with pytest.raises(ZeroId):
        probe.consume_flow_events([FlowEvent(0, 1, 1, 0, EventReason.IDLE_TIMEOUT, key(0))])


def test_export_flush_counts():
    sink = io.StringIO()
    ex = Exporter(sink, batch=64)
    assert ex.export_flush([]) == 0
    rec = ExportRecord(key(3), "HTTP", 4, 400, 10, 20, EndReason.HOST_TIMEOUT)
    n = ex.export_flush([rec])
    line = sink.getvalue()
    assert n == len(line.encode()) and line.endswith("\n") and line.count("\n") == 1
    assert ExportRecord.from_dict(json.loads(line)) == rec
    assert list(json.loads(line)) == ["key", "l7", "packets", "bytes", "first_seen_ns", "last_seen_ns", "end_reason"]
    assert list(json.loads(line)["key"]) == ["proto", "src", "dst", "sport", "dport"]


def test_export_sink_failure():
    sink = io.StringIO()
    sink.close()
    ex = Exporter(sink)
    with pytest.raises(SinkWriteError):
        ex.export_flush([ExportRecord(key(3), "x", 1, 1, 0, 0, EndReason.SHUTDOWN)])


def test_export_batches():
    sink = io.StringIO()
    ex = Exporter(sink, batch=4)
    for i in range(10):
        ex.add(ExportRecord(key(i), "x", 1, 1, 0, 0, EndReason.SHUTDOWN))
    assert sink.getvalue().count("\n") == 8
    ex.flush()
    assert sink.getvalue().count("\n") == 10 == ex.records


# -- whole scenario ----------------------------------------------------------


def _small(offload=True, dpi=True, budget=40.0, seed=0, flows=50.0, births=25.0, pps=8000.0, workers=1):
    return ScenarioConfig(
        active_flows=flows,
        new_flows_per_sec=births,
        packets_per_sec=pps,
        rate_bits_per_sec=None,
        packet_size=200,
        duration=2 * 10**9,
        scale_factor=1.0,
        seed=seed,
        hw=HwConfig(capacity=256, learn_rate_per_sec=500, learn_burst=20, hw_idle_timeout=10**8),
        probe=ProbeConfig(
            workers=workers,
            host_queue_depth=64,
            host_budget_units_per_tick=budget,
            dpi_enabled=dpi,
            offload_enabled=offload,
            idle_timeout=10**8,
        ),
    )


def test_tiny_scenario():
    cfg = _small(flows=2, births=1, pps=10)
    # packets are 200 ms apart; keep both flows alive between them
    cfg.probe.idle_timeout = cfg.hw.hw_idle_timeout = 10**9
    sink = io.StringIO()
    m = simulate(cfg, sink=sink).metrics
    assert m.dropped == 0
    assert m.exports == 2 == len(sink.getvalue().splitlines())
    assert m.accounted() == m.generated_packets == 20


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    budget=st.floats(5.0, 60.0),
    dpi=st.booleans(),
    workers=st.integers(1, 3),
)
def test_offload_never_hurts(seed, budget, dpi, workers):
    off = simulate(_small(False, dpi, budget, seed, workers=workers), check_every=1).metrics
    on = simulate(_small(True, dpi, budget, seed, workers=workers), check_every=1).metrics
    assert on.dropped_queue_full <= off.dropped_queue_full
    assert on.mean_cpu_load <= off.mean_cpu_load + 1e-12
    assert on.duplicate_programs == 0 and on.orphan_events == 0


def test_sync_invariant_every_tick_with_workers():
    # check_every=1 raises on any hardware entry without a live host twin
    r = simulate(_small(workers=4, budget=200.0), check_every=1)
    m = r.metrics
    assert m.hw_handled_packets > 0
    assert m.hw_inserts + m.hw_table_full_rejects <= m.program_requests


def test_each_flow_requested_at_most_once():
    r = simulate(_small(budget=200.0))
    assert r.metrics.program_requests <= r.metrics.flows_created
    assert r.metrics.duplicate_programs == 0
    assert r.probe.exporter.records == r.metrics.flows_created


def test_dpi_prefix_bound_without_backlog():
    """Host sees the DPI prefix plus whatever arrives before the entry is live."""
    cfg = _small(budget=1000.0, flows=20, births=10, pps=2000)
    cfg.hw = HwConfig(learn_burst=1000, learn_rate_per_sec=1e6)
    sched = build_schedule(cfg)
    m = simulate(cfg).metrics
    assert m.backlog_peak <= len(sched.flows)
    assert m.hw_table_full_rejects == 0
    for f in sched.flows:
        # the request is programmed at the end of its tick at the latest
        assert f.gap > 0
    gap = min(f.gap for f in sched.flows)
    in_flight = math.ceil((cfg.hw.program_latency + cfg.probe.tick) / gap)
    assert m.host_processed_packets <= (8 + in_flight) * len(sched.flows)
    assert m.host_processed_packets >= 8 * len(sched.flows)
