"""Run the 5-row flow-count sweep at desk scale and print drop/CPU tables.

    python3 scripts/table1_sweep.py [--scale 1e-3] [--jobs 1] [--out sweep.csv]
"""

import argparse
import sys

from flowgate import bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scale", type=float, default=1e-3)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default=None, help="also write the CSV here")
    args = ap.parse_args()

    results = bench.bench_sweep(bench.SweepMatrix(base=bench.table1_base(args.scale)), jobs=args.jobs)
    if args.out:
        with open(args.out, "w") as fh:
            bench.write_sweep_csv(results, fh)

    names = list(dict.fromkeys(r.scenario for r in results))
    labels = {(True, False): "dpi", (False, False): "no-dpi", (True, True): "dpi+offload", (False, True): "offload"}
    for metric, fmt in (("drop_pct", "{:6.1f}%"), ("cpu_load", "{:7.3f}")):
        print(f"\n{metric}")
        print(f"{'':14}" + "".join(f"{n:>12}" for n in names))
        for dpi, off in bench.CELL_ORDER:
            row = [r.row()[metric] for r in results if (r.dpi, r.offload) == (dpi, off)]
            print(f"{labels[(dpi, off)]:14}" + "".join(f"{fmt.format(v):>12}" for v in row))
    return 0


if __name__ == "__main__":
    sys.exit(main())
