"""``flowgate`` command line.

Exit codes: 0 success, 1 configuration error, 2 invariant violation,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .config import load_scenario, scenario_to_dict
from .errors import ConfigInvalid, InvariantViolation, ParseError
from .hw import PRESETS
from .runner import simulate
from .traffic import ScenarioConfig, build_schedule, generate_stream, write_trace

EXIT_CONFIG = 1
EXIT_INVARIANT = 2
EXIT_USAGE = 64

log = logging.getLogger("flowgate")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="TOML scenario file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--scale", type=float, help="override scale_factor")
    common.add_argument("--offload", type=_onoff, help="on|off")
    common.add_argument("--dpi", type=_onoff, help="on|off")
    common.add_argument("--preset", choices=sorted(PRESETS), help="base hardware configuration")

    parser = _Parser(prog="flowgate", description="Flow-offload probe emulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="run one scenario")
    sub.add_parser("gen", parents=[common], help="write the scenario's packet trace")
    p = sub.add_parser("sweep", parents=[common], help="sweep the flow-count matrix")
    p.add_argument("--jobs", type=int, default=1)
    sub.add_parser("compare", parents=[common], help="offload off vs on")
    return parser


def _scenario(args) -> ScenarioConfig:
    if args.scenario is not None:
        cfg = load_scenario(args.scenario, args.preset)
    elif args.command == "sweep":
        cfg = bench.table1_base(args.scale or 1e-3)
    else:
        raise ConfigInvalid("required for this command", "--scenario")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.scale is not None:
        cfg.scale_factor = args.scale
    probe = cfg.probe
    if args.offload is not None:
        probe = replace(probe, offload_enabled=args.offload)
    if args.dpi is not None:
        probe = replace(probe, dpi_enabled=args.dpi)
    cfg.probe = probe
    return cfg.validate()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def cmd_run(args) -> int:
    cfg = _scenario(args)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "flows.jsonl", "w") as sink:
        result = simulate(cfg, sink=sink, check_every=100)
    m = result.metrics
    _dump_json({"scenario": scenario_to_dict(cfg), "metrics": m.summary()}, args.out / "metrics.json")
    with open(args.out / "ticks.csv", "w") as fh:
        m.write_series_csv(fh)
    print(
        f"generated={m.generated_packets} host={m.host_processed_packets} hw={m.hw_handled_packets} "
        f"drop={100 * m.drop_pct:.2f}% cpu={m.mean_cpu_load:.3f} exports={m.exports}"
    )
    return 0


def cmd_gen(args) -> int:
    cfg = _scenario(args)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "trace.jsonl", "w") as fh:
        n = write_trace(generate_stream(build_schedule(cfg)), fh)
    print(f"wrote {n} packets to {args.out / 'trace.jsonl'}")
    return 0


def cmd_sweep(args) -> int:
    base = _scenario(args)
    matrix = bench.SweepMatrix(base=base)
    results = bench.bench_sweep(matrix, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "sweep.csv", "w") as fh:
        bench.write_sweep_csv(results, fh)
    bench.write_sweep_csv(results, sys.stdout)
    return 0


def cmd_compare(args) -> int:
    cfg = _scenario(args)
    report = bench.compare_offload(cfg, args.scenario.stem)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "compare.csv", "w") as fh:
        bench.write_compare_csv(report, fh)
    _dump_json(report.to_dict(), args.out / "compare.json")
    bench.write_compare_csv(report, sys.stdout)
    return 0


COMMANDS = {"run": cmd_run, "gen": cmd_gen, "sweep": cmd_sweep, "compare": cmd_compare}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FLOWGATE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigInvalid, ParseError) as exc:
        print(f"flowgate: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"flowgate: INVARIANT VIOLATION: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FileNotFoundError as exc:
        print(f"flowgate: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
