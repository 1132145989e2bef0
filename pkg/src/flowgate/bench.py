"""Offload-vs-CPU sweeps and paired comparisons."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import IO

from .flow_core import NS_PER_SEC
from .hw import nt200a02
from .probe import Metrics, ProbeConfig
from .runner import run_scenario
from .traffic import ScenarioConfig

# (active flows, new flows per second) at full scale
PAPER_ROWS = (
    (10_000, 1_000),
    (100_000, 10_000),
    (1_000_000, 100_000),
    (10_000_000, 1_000_000),
    (20_000_000, 2_000_000),
)

# row order inside each flow-count group: (dpi, offload)
CELL_ORDER = ((True, False), (False, False), (True, True), (False, True))

CSV_HEADER = (
    "scenario",
    "flows",
    "births",
    "dpi",
    "offload",
    "drop_pct",
    "cpu_load",
    "host_frac",
    "hw_frac",
    "occ_peak",
    "backlog_peak",
)


def _label(n: float) -> str:
    for div, suffix in ((1_000_000, "M"), (1_000, "K")):
        if n >= div and n % div == 0:
            return f"{n // div:g}{suffix}"
    return f"{n:g}"


# host units per 1 ms tick at scale 1e-3; tuned once so the DPI-on,
# offload-off 1M-flow analog drops about 24% of packets
TABLE1_BUDGET = 34.0


def table1_base(scale_factor: float = 1e-3) -> ScenarioConfig:
    """Passive, 10 Mpps / 80 Gbps, worst-case DPI traffic at desk scale.

    ``TABLE1_BUDGET`` is the only tuned constant; the memory-model costs
    make per-packet host work grow with the size of the flow cache.
    """
    return ScenarioConfig(
        active_flows=1_000_000.0,
        new_flows_per_sec=100_000.0,
        packet_size=970,
        rate_bits_per_sec=80e9,
        duration=20 * NS_PER_SEC,
        scale_factor=scale_factor,
        hw=replace(nt200a02().scaled(scale_factor), hw_idle_timeout=5 * NS_PER_SEC),
        probe=ProbeConfig(
            workers=1,
            host_queue_depth=2048,
            host_budget_units_per_tick=TABLE1_BUDGET * scale_factor / 1e-3,
            cost_base=1,
            cost_dpi=3,
            cost_new_flow=4.0,
            cost_miss=6.0,
            cache_bytes_per_worker=128 * 1024,
            entry_bytes=256,
            idle_timeout=5 * NS_PER_SEC,
        ),
    )


@dataclass
class SweepMatrix:
    base: ScenarioConfig = field(default_factory=table1_base)
    rows: tuple[tuple[float, float], ...] = PAPER_ROWS
    cells: tuple[tuple[bool, bool], ...] = CELL_ORDER

    def scenarios(self):
        for flows, births in self.rows:
            for dpi, offload in self.cells:
                probe = replace(self.base.probe, dpi_enabled=dpi, offload_enabled=offload)
                cfg = replace(self.base, active_flows=float(flows), new_flows_per_sec=float(births), probe=probe)
                yield f"{_label(flows)}/{_label(births)}", cfg


@dataclass
class CellResult:
    scenario: str
    flows: float
    births: float
    dpi: bool
    offload: bool
    metrics: Metrics

    def row(self) -> dict:
        m = self.metrics
        return {
            "scenario": self.scenario,
            "flows": round(self.flows),
            "births": round(self.births),
            "dpi": int(self.dpi),
            "offload": int(self.offload),
            "drop_pct": round(100 * m.drop_pct, 4),
            "cpu_load": round(m.mean_cpu_load, 6),
            "host_frac": round(m.host_fraction, 6),
            "hw_frac": round(m.hw_fraction, 6),
            "occ_peak": round(m.occupancy_peak, 6),
            "backlog_peak": m.backlog_peak,
        }


def run_cell(name: str, cfg: ScenarioConfig) -> CellResult:
    m = run_scenario(cfg)
    return CellResult(name, cfg.flows, cfg.births, cfg.probe.dpi_enabled, cfg.probe.offload_enabled, m)


def bench_sweep(matrix: SweepMatrix | None = None, jobs: int = 1) -> list[CellResult]:
    matrix = matrix or SweepMatrix()
    cells = list(matrix.scenarios())
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(run_cell, *zip(*cells)))
    return [run_cell(name, cfg) for name, cfg in cells]


def write_sweep_csv(results: list[CellResult], fh: IO[str]) -> None:
    writer = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for r in results:
        writer.writerow(r.row())


@dataclass
class ComparisonReport:
    off: CellResult
    on: CellResult

    @property
    def deltas(self) -> dict:
        a, b = self.off.row(), self.on.row()
        return {
            f"delta_{k}": round(b[k] - a[k], 6)
            for k in ("drop_pct", "cpu_load", "host_frac", "hw_frac", "occ_peak", "backlog_peak")
        }

    def rows(self) -> list[dict]:
        return [self.off.row(), self.on.row()]

    def to_dict(self) -> dict:
        return {"offload_off": self.off.row(), "offload_on": self.on.row(), **self.deltas}


def compare_offload(config: ScenarioConfig, name: str = "scenario") -> ComparisonReport:
    results = []
    for offload in (False, True):
        cfg = replace(config, probe=replace(config.probe, offload_enabled=offload))
        results.append(run_cell(name, cfg))
    return ComparisonReport(*results)


def write_compare_csv(report: ComparisonReport, fh: IO[str]) -> None:
    write_sweep_csv([report.off, report.on], fh)
