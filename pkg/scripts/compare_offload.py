"""Offload off vs on for one scenario file; prints the paired rows and deltas.

    python3 scripts/compare_offload.py scenarios/table1_1m.toml
"""

import json
import sys
from pathlib import Path

from flowgate import bench
from flowgate.config import load_scenario


def main(argv):
    if len(argv) != 1:
        print(__doc__.strip(), file=sys.stderr)
        return 64
    path = Path(argv[0])
    report = bench.compare_offload(load_scenario(path), path.stem)
    bench.write_compare_csv(report, sys.stdout)
    print(json.dumps(report.deltas, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
