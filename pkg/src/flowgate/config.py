"""Scenario files.

A scenario is a TOML document with up to four tables::

    [scenario]   # traffic: flows, births, packet size, rate, duration_s, seed ...
    [hw]         # emulated NIC flow manager
    [probe]      # software probe, plus [[probe.policy]] rules
    [dpi]        # max_dpi_packets, scratch_bytes, plus [[dpi.dissectors]]

Durations are written in seconds with an ``_s`` suffix (``duration_s``,
``tick_s``, ``program_latency_s`` ...). Unknown tables or keys are errors.
"""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dpi import DissectorSpec
from .errors import ConfigInvalid
from .flow_core import NS_PER_SEC
from .hw import PRESETS, HwConfig
from .probe import Mode, PolicyRule, ProbeConfig
from .traffic import ScenarioConfig

TIME_FIELDS = {"duration", "min_flow_lifetime", "tick", "idle_timeout", "program_latency", "hw_idle_timeout"}
_NESTED = {"hw", "probe", "dissectors", "max_dpi_packets", "scratch_bytes", "policy"}


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    where = f"{section}.{name}"
    if name in TIME_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            raise ConfigInvalid(f"expected seconds, got {value!r}", where + "_s")
        return round(value * NS_PER_SEC)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(f"expected true/false, got {value!r}", where)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"expected an integer, got {value!r}", where)
    elif isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalid(f"expected a number, got {value!r}", where)
    elif isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigInvalid(f"expected a list, got {value!r}", where)
        return tuple(value)
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigInvalid(f"expected a table, got {value!r}", where)
    elif not isinstance(value, str):
        raise ConfigInvalid(f"expected a string, got {value!r}", where)
    return value


def _fill(cls, section: str, table: dict, base=None, skip=frozenset()):
    """Overlay ``table`` onto ``base`` (or the class defaults), rejecting unknown keys."""
    obj = base if base is not None else cls()
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    changes = {}
    for raw, value in table.items():
        name = raw[:-2] if raw.endswith("_s") and raw[:-2] in TIME_FIELDS else raw
        if name not in known or (name in TIME_FIELDS) != raw.endswith("_s"):
            raise ConfigInvalid("unknown key", f"{section}.{raw}")
        changes[name] = _coerce(section, name, value, getattr(obj, name))
    return dataclasses.replace(obj, **changes)


def _policy(rules: Any) -> list[PolicyRule]:
    if not isinstance(rules, list):
        raise ConfigInvalid("expected an array of tables", "probe.policy")
    out = []
    for i, rule in enumerate(rules):
        unknown = set(rule) - {f.name for f in dataclasses.fields(PolicyRule)}
        if unknown:
            raise ConfigInvalid("unknown key", f"probe.policy[{i}].{sorted(unknown)[0]}")
        out.append(PolicyRule(**rule))
    return out


def _dissectors(items: Any) -> list[DissectorSpec]:
    if not isinstance(items, list):
        raise ConfigInvalid("expected an array of tables", "dpi.dissectors")
    allowed = {f.name for f in dataclasses.fields(DissectorSpec)}
    out = []
    for i, item in enumerate(items):
        unknown = set(item) - allowed
        if unknown:
            raise ConfigInvalid("unknown key", f"dpi.dissectors[{i}].{sorted(unknown)[0]}")
        try:
            out.append(DissectorSpec(**item))
        except TypeError as exc:
            raise ConfigInvalid(str(exc), f"dpi.dissectors[{i}]") from None
    return out


def scenario_from_dict(doc: dict, preset: str | None = None) -> ScenarioConfig:
    unknown = set(doc) - {"scenario", "hw", "probe", "dpi"}
    if unknown:
        raise ConfigInvalid("unknown table", sorted(unknown)[0])
    if preset is not None and preset not in PRESETS:
        raise ConfigInvalid(f"unknown preset {preset!r}", "preset")
    hw_base = PRESETS[preset]() if preset else HwConfig()
    hw = _fill(HwConfig, "hw", doc.get("hw", {}), hw_base)

    probe_doc = dict(doc.get("probe", {}))
    policy = _policy(probe_doc.pop("policy", []))
    probe = _fill(ProbeConfig, "probe", probe_doc, skip={"policy"})
    if isinstance(probe.mode, str):
        try:
            probe.mode = Mode(probe.mode)
        except ValueError:
            raise ConfigInvalid(f"unknown mode {probe.mode!r}", "probe.mode") from None
    probe.policy = policy

    dpi_doc = dict(doc.get("dpi", {}))
    dissectors = _dissectors(dpi_doc.pop("dissectors")) if "dissectors" in dpi_doc else None
    for k in dpi_doc:
        if k not in ("max_dpi_packets", "scratch_bytes"):
            raise ConfigInvalid("unknown key", f"dpi.{k}")

    scen = _fill(ScenarioConfig, "scenario", doc.get("scenario", {}), skip=_NESTED)
    if "packets_per_sec" in doc.get("scenario", {}) and "rate_bits_per_sec" not in doc.get("scenario", {}):
        scen.rate_bits_per_sec = None
    for k, v in dpi_doc.items():
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigInvalid(f"expected an integer, got {v!r}", f"dpi.{k}")
        setattr(scen, k, v)
    scen.dissectors = dissectors
    scen.hw = hw
    scen.probe = probe
    return scen.validate()


def load_scenario(path: str | Path, preset: str | None = None) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"malformed TOML: {exc}", str(path)) from None
    return scenario_from_dict(doc, preset)


def loads_scenario(text: str, preset: str | None = None) -> ScenarioConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"malformed TOML: {exc}") from None
    return scenario_from_dict(doc, preset)


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {k: _plain(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, Mode):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def scenario_to_dict(config: ScenarioConfig) -> dict:
    """JSON-friendly view of the effective configuration (times in ns)."""
    out = {}
    for f in dataclasses.fields(config):
        out[f.name] = _plain(getattr(config, f.name))
    return out
