"""Flow identity, simulated packets and the host-side flow cache.

Time is an integer count of nanoseconds since scenario start. Every worker
owns one :class:`FlowTable`; nothing here is shared between workers.
"""

from __future__ import annotations

import ipaddress
from collections import OrderedDict
from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING, NamedTuple

from .errors import DoubleFree, IdExhausted, TableFull, ZeroId

if TYPE_CHECKING:
    from .dpi import DpiState
    from .hw import FlowAction

SimTime = int
NS_PER_SEC = 1_000_000_000
NS_PER_MS = 1_000_000
NS_PER_US = 1_000

TCP = 6
UDP = 17

RANDOM = "random"
UNKNOWN = "Unknown"
DETECTING = "Detecting"

_U64 = (1 << 64) - 1


def seconds(s: float) -> SimTime:
    return round(s * NS_PER_SEC)


def _addr(value: int | str) -> int:
    if isinstance(value, str):
        return int(ipaddress.IPv4Address(value))
    if not 0 <= value <= 0xFFFFFFFF:
        raise ValueError(f"IPv4 address out of range: {value}")
    return value


def format_addr(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


class FlowKey(NamedTuple):
    """Unidirectional 5-tuple (plus optional VLAN). Endpoints are never sorted."""

    proto: int
    src_addr: int
    dst_addr: int
    src_port: int = 0
    dst_port: int = 0
    vlan: int | None = None

    def __str__(self) -> str:
        s = f"{self.proto}:{format_addr(self.src_addr)}:{self.src_port}->{format_addr(self.dst_addr)}:{self.dst_port}"
        return s if self.vlan is None else f"{s}@{self.vlan}"


def make_flow_key(
    proto: int,
    src: int | str,
    dst: int | str,
    sport: int = 0,
    dport: int = 0,
    vlan: int | None = None,
) -> FlowKey:
    """Build the canonical key for a header; ports are zeroed unless TCP/UDP."""
    if not 0 <= proto <= 0xFF:
        raise ValueError(f"protocol out of range: {proto}")
    if vlan is not None and not 0 <= vlan <= 0xFFF:
        raise ValueError(f"vlan out of range: {vlan}")
    if proto in (TCP, UDP):
        for port in (sport, dport):
            if not 0 <= port <= 0xFFFF:
                raise ValueError(f"port out of range: {port}")
    else:
        sport = dport = 0
    return FlowKey(proto, _addr(src), _addr(dst), sport, dport, vlan)


class Packet(NamedTuple):
    ts: SimTime
    key: FlowKey
    wire_len: int
    ingress_port: int = 0
    payload_class: str = RANDOM
    flow_seq: int = 0


class OffloadState(IntEnum):
    NOT_ELIGIBLE = 0
    ELIGIBLE = 1
    REQUESTED = 2
    PROGRAMMED = 3
    HW_PURGED = 4


@dataclass(slots=True, eq=False)
class HostFlowEntry:
    key: FlowKey
    first_seen: SimTime
    last_seen: SimTime
    flow_id: int = 0
    sw_packets: int = 0
    sw_bytes: int = 0
    hw_packets: int = 0
    hw_bytes: int = 0
    ingress_port: int = 0
    dpi: DpiState | None = None
    l7: str = DETECTING
    offload_state: OffloadState = OffloadState.NOT_ELIGIBLE
    action: FlowAction | None = None
    # set when the hardware refused the program request; the host owns the flow again
    hw_rejected: bool = False

    @property
    def total_packets(self) -> int:
        return self.sw_packets + self.hw_packets

    @property
    def total_bytes(self) -> int:
        return self.sw_bytes + self.hw_bytes

    @property
    def hw_owned(self) -> bool:
        return (
            self.offload_state in (OffloadState.REQUESTED, OffloadState.PROGRAMMED)
            and not self.hw_rejected
        )

    def advance(self, state: OffloadState) -> None:
        if state <= self.offload_state:
            raise ValueError(
                f"offload state may only move forward: {self.offload_state.name} -> {state.name}"
            )
        self.offload_state = state


class FlowTable:
    """Private flow cache of one worker.

    Entries are indexed by key and, once allocated, by flow id. Host-owned
    entries are additionally kept in last-seen order so the idle scan only
    inspects the oldest ones; entries handed to hardware leave that list and
    can then only be released by a purge event (or shutdown).
    """

    def __init__(self, idle_timeout: SimTime = 30 * NS_PER_SEC, max_entries: int = 1 << 20):
        if max_entries < 1:
            raise ValueError("max_entries must be positive")
        self.idle_timeout = idle_timeout
        self.max_entries = max_entries
        self.entries: dict[FlowKey, HostFlowEntry] = {}
        self.id_index: dict[int, FlowKey] = {}
        self._aging: OrderedDict[FlowKey, HostFlowEntry] = OrderedDict()
        self._next_id = 1

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self.entries

    def get(self, key: FlowKey) -> HostFlowEntry | None:
        return self.entries.get(key)

    def upsert(self, key: FlowKey, ts: SimTime) -> tuple[HostFlowEntry, bool]:
        entry = self.entries.get(key)
        if entry is not None:
            return entry, False
        if len(self.entries) >= self.max_entries:
            raise TableFull(f"flow table full ({self.max_entries} entries)")
        entry = HostFlowEntry(key=key, first_seen=ts, last_seen=ts)
        self.entries[key] = entry
        self._aging[key] = entry
        return entry, True

    def touch(self, entry: HostFlowEntry, pkt: Packet) -> HostFlowEntry:
        if pkt.ts < entry.last_seen:
            raise ValueError("packet timestamp precedes entry last_seen")
        entry.sw_packets += 1
        entry.sw_bytes += pkt.wire_len
        entry.last_seen = pkt.ts
        if entry.key in self._aging:
            self._aging.move_to_end(entry.key)
        return entry

    def allocate_flowid(self, entry: HostFlowEntry) -> int:
        if entry.flow_id:
            raise ValueError(f"entry already has flow id {entry.flow_id}")
        if self.entries.get(entry.key) is not entry:
            raise KeyError(entry.key)
        if self._next_id > _U64:
            raise IdExhausted("64-bit flow id space exhausted")
        fid = self._next_id
        self._next_id += 1
        entry.flow_id = fid
        self.id_index[fid] = entry.key
        return fid

    def resolve_flowid(self, flow_id: int) -> HostFlowEntry | None:
        if flow_id == 0:
            raise ZeroId("flow id 0 denotes an unclassified flow")
        key = self.id_index.get(flow_id)
        return None if key is None else self.entries[key]

    def hand_to_hardware(self, entry: HostFlowEntry) -> None:
        """Exclude the entry from idle scans; hardware now decides its expiry."""
        self._aging.pop(entry.key, None)

    def reclaim_from_hardware(self, entry: HostFlowEntry) -> None:
        # re-insert at its last_seen position so the aging order stays sorted
        newer = []
        for k in reversed(self._aging):
            if self._aging[k].last_seen <= entry.last_seen:
                break
            newer.append(k)
        self._aging[entry.key] = entry
        for k in reversed(newer):
            self._aging.move_to_end(k)

    def free(self, entry: HostFlowEntry) -> None:
        if self.entries.get(entry.key) is not entry:
            raise DoubleFree(f"entry for {entry.key} is not live")
        del self.entries[entry.key]
        self._aging.pop(entry.key, None)
        if entry.flow_id:
            del self.id_index[entry.flow_id]

    def expire_scan(self, now: SimTime) -> list[HostFlowEntry]:
        expired = []
        while self._aging:
            key, entry = next(iter(self._aging.items()))
            if now - entry.last_seen <= self.idle_timeout:
                break
            self.free(entry)
            expired.append(entry)
        return expired

    def drain(self) -> list[HostFlowEntry]:
        """Remove and return every entry (shutdown)."""
        out = list(self.entries.values())
        self.entries.clear()
        self.id_index.clear()
        self._aging.clear()
        return out
