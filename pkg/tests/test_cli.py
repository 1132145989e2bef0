import csv
import json
from pathlib import Path

import pytest

from flowgate import cli
from flowgate.errors import InvariantViolation
from flowgate.probe import Probe, read_exports
from flowgate.traffic import read_trace

SCEN = Path(__file__).parent.parent / "scenarios"


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_run_writes_outputs(tmp_path):
    assert run("run", "--scenario", SCEN / "tiny.toml", "--out", tmp_path) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["metrics"]["exports"] == 2
    with open(tmp_path / "flows.jsonl") as fh:
        recs = read_exports(fh)
    assert sum(r.total_packets for r in recs) == 20
    rows = list(csv.DictReader(open(tmp_path / "ticks.csv")))
    assert list(rows[0]) == ["tick_index", "cpu_load", "hw_occupancy", "prog_queue_depth", "drops_cum"]


def test_run_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("run", "--scenario", SCEN / "inline_policy.toml", "--out", out, "--seed", 7) == 0
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    assert (a / "flows.jsonl").read_bytes() == (b / "flows.jsonl").read_bytes()


def test_overrides(tmp_path):
    assert run("run", "--scenario", SCEN / "tiny.toml", "--out", tmp_path, "--offload", "off", "--dpi", "off") == 0
    doc = json.loads((tmp_path / "metrics.json").read_text())
    assert doc["scenario"]["probe"]["offload_enabled"] is False
    assert doc["metrics"]["hw_handled_packets"] == 0


def test_config_error_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[scenario]\npacket_size = 10\n")
    assert run("run", "--scenario", bad, "--out", tmp_path) == 1
    assert "packet_size" in capsys.readouterr().err


def test_missing_file_exit_one(tmp_path):
    assert run("run", "--scenario", tmp_path / "nope.toml", "--out", tmp_path) == 1


def test_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        run("run", "--bogus")
    assert err.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit):
        run("run", "--offload", "maybe")


def test_invariant_violation_exit_two(tmp_path, monkeypatch):
    def broken(self):
        raise InvariantViolation("conservation")

    monkeypatch.setattr(Probe, "check_final", broken)
    assert run("run", "--scenario", SCEN / "tiny.toml", "--out", tmp_path) == 2


def test_gen(tmp_path):
    assert run("gen", "--scenario", SCEN / "tiny.toml", "--out", tmp_path) == 0
    with open(tmp_path / "trace.jsonl") as fh:
        assert len(read_trace(fh)) == 20


def test_compare(tmp_path):
    assert run("compare", "--scenario", SCEN / "inline_policy.toml", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "compare.json").read_text())
    assert doc["offload_off"]["hw_frac"] == 0
    assert doc["delta_cpu_load"] < 0
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    assert [r["offload"] for r in rows] == ["0", "1"]


@pytest.mark.slow
def test_sweep_small_scale(tmp_path):
    assert run("sweep", "--scale", "1e-4", "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert len(rows) == 20
    assert rows[0]["scenario"] == "10K/1K"
