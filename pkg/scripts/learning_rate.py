"""Programming backlog when new flows outpace the hardware learning rate.

Offers 2x the learning rate in new flows and prints, once per simulated
second, inserts in that second, queue depth and occupancy. A second run
starts near 95% occupancy to show the degraded insert rate.
"""

from flowgate.flow_core import NS_PER_MS, NS_PER_SEC, make_flow_key
from flowgate.hw import FlowAction, HwConfig, HwFlowManager, ProgramRequest
from flowgate.probe import ProbeConfig
from flowgate.runner import simulate
from flowgate.traffic import ScenarioConfig


def backlog_run():
    cfg = ScenarioConfig(
        active_flows=2000,
        new_flows_per_sec=2000,
        packets_per_sec=8000,
        rate_bits_per_sec=None,
        packet_size=128,
        duration=6 * NS_PER_SEC,
        scale_factor=1.0,
        hw=HwConfig(capacity=100_000, learn_rate_per_sec=1000, learn_burst=100),
        probe=ProbeConfig(dpi_enabled=False, host_budget_units_per_tick=100),
    )
    m = simulate(cfg).metrics
    per_sec = NS_PER_SEC // cfg.probe.tick
    print("second  inserts  backlog  occupancy")
    for s in range(len(m.inserts_per_tick) // per_sec):
        window = slice(s * per_sec, (s + 1) * per_sec)
        print(
            f"{s:6d}  {sum(m.inserts_per_tick[window]):7d}  {m.prog_queue_depth[window.stop - 1]:7d}"
            f"  {m.hw_occupancy[window.stop - 1]:9.4f}"
        )


def degraded_run(start_occ=0.95, capacity=100_000):
    fill = round(start_occ * capacity)
    cfg = HwConfig(capacity=capacity, max_kicks=500, learn_rate_per_sec=1000, learn_burst=fill)
    mgr = HwFlowManager(cfg)
    mgr.tick(0)
    for i in range(fill + 3000):
        k = make_flow_key(6, (10 << 24) + i, "10.9.9.9", 1234, 80)
        mgr.submit(ProgramRequest(k, i + 1, FlowAction.pass_to(-1), 0))
    t = cfg.program_latency
    mgr.tick(t)
    print(f"\nfilled to {mgr.occupancy_fraction:.4f}, multiplier {mgr.rate_multiplier():.3f}")
    before = mgr.inserts
    for step in range(1, 1001):
        mgr.tick(t + step * NS_PER_MS)
    print(f"inserts in 1 s: {mgr.inserts - before} (nominal {cfg.learn_rate_per_sec:.0f})")


if __name__ == "__main__":
    backlog_run()
    degraded_run()
