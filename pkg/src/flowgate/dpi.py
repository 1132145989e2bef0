"""Toy deep-packet-inspection engine.

Dissectors match on the generator's ground-truth payload class instead of
payload bytes. What matters is the gating state machine: a flow stays in
``Detecting`` until one dissector confirms it, every dissector has given
up, or the per-flow packet budget runs out. Per-flow scratch memory is
accounted so that callers can observe when it is released.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import ConfigInvalid, DuplicateName, FeedAfterVerdict
from .flow_core import UNKNOWN

DEFAULT_MAX_DPI_PACKETS = 8
DEFAULT_SCRATCH_BYTES = 1024


@dataclass(frozen=True)
class DissectorSpec:
    name: str
    match_class: str
    packets_to_confirm: int = 1
    packets_to_reject: int = 1

    def __post_init__(self):
        if self.packets_to_confirm < 1:
            raise ConfigInvalid("must be >= 1", "packets_to_confirm")
        if self.packets_to_reject < 1:
            raise ConfigInvalid("must be >= 1", "packets_to_reject")


class Verdict(Enum):
    DETECTING = "Detecting"
    DETECTED = "Detected"
    UNKNOWN = "Unknown"


@dataclass(slots=True, eq=False)
class DpiState:
    candidates: list[str]
    scratch: int
    inspected: int = 0
    verdict: Verdict = Verdict.DETECTING
    protocol: str | None = None
    hits: dict[str, int] = field(default_factory=dict)
    misses: dict[str, int] = field(default_factory=dict)

    @property
    def label(self) -> str:
        if self.verdict is Verdict.DETECTED:
            return self.protocol
        return self.verdict.value


# toy stand-ins for a real dissector corpus; bittorrent keeps Random flows
# in Detecting for the whole packet budget
DEFAULT_DISSECTORS = (
    DissectorSpec("HTTP", "http", packets_to_confirm=2, packets_to_reject=3),
    DissectorSpec("DNS", "dns", packets_to_confirm=1, packets_to_reject=1),
    DissectorSpec("TLS", "tls", packets_to_confirm=3, packets_to_reject=4),
    DissectorSpec("Spotify", "spotify", packets_to_confirm=4, packets_to_reject=5),
    DissectorSpec("NetFlix", "netflix", packets_to_confirm=4, packets_to_reject=5),
    DissectorSpec("YouTube", "youtube", packets_to_confirm=4, packets_to_reject=5),
    DissectorSpec("BitTorrent", "bittorrent", packets_to_confirm=6, packets_to_reject=12),
)


class DpiEngine:
    """Registry of dissectors plus live scratch-memory accounting.

    The registry is meant to be filled once at setup and then shared
    read-only; :meth:`new_state` / :meth:`release` keep ``live_scratch_bytes``
    equal to the scratch held by flows still in ``Detecting``.
    """

    def __init__(
        self,
        max_dpi_packets: int = DEFAULT_MAX_DPI_PACKETS,
        scratch_bytes: int = DEFAULT_SCRATCH_BYTES,
    ):
        if max_dpi_packets < 1:
            raise ConfigInvalid("must be >= 1", "max_dpi_packets")
        self.max_dpi_packets = max_dpi_packets
        self.scratch_bytes = scratch_bytes
        self.dissectors: list[DissectorSpec] = []
        self.live_scratch_bytes = 0
        self.detecting_flows = 0

    @classmethod
    def with_defaults(cls, **kwargs) -> DpiEngine:
        engine = cls(**kwargs)
        for spec in DEFAULT_DISSECTORS:
            if spec.packets_to_confirm <= engine.max_dpi_packets:
                engine.register(spec)
        return engine

    def register(self, spec: DissectorSpec) -> DpiEngine:
        if any(d.name == spec.name for d in self.dissectors):
            raise DuplicateName(spec.name)
        if spec.packets_to_confirm > self.max_dpi_packets:
            raise ConfigInvalid(
                f"{spec.name} needs {spec.packets_to_confirm} packets, budget is {self.max_dpi_packets}",
                "packets_to_confirm",
            )
        self.dissectors.append(spec)
        return self

    def new_state(self) -> DpiState:
        self.live_scratch_bytes += self.scratch_bytes
        self.detecting_flows += 1
        return DpiState(candidates=[d.name for d in self.dissectors], scratch=self.scratch_bytes)

    def release(self, state: DpiState) -> None:
        if state.scratch:
            self.live_scratch_bytes -= state.scratch
            self.detecting_flows -= 1
            state.scratch = 0

    def feed(self, state: DpiState, payload_class: str) -> Verdict:
        if state.verdict is not Verdict.DETECTING:
            raise FeedAfterVerdict(f"flow already {state.verdict.value}")
        state.inspected += 1
        rejected = []
        # registration order decides ties
        for spec in self.dissectors:
            if spec.name not in state.candidates:
                continue
            if spec.match_class == payload_class:
                n = state.hits.get(spec.name, 0) + 1
                state.hits[spec.name] = n
                if n >= spec.packets_to_confirm:
                    state.verdict = Verdict.DETECTED
                    state.protocol = spec.name
                    self.release(state)
                    return state.verdict
            else:
                n = state.misses.get(spec.name, 0) + 1
                state.misses[spec.name] = n
                if n >= spec.packets_to_reject:
                    rejected.append(spec.name)
        for name in rejected:
            state.candidates.remove(name)
        if (self.dissectors and not state.candidates) or state.inspected >= self.max_dpi_packets:
            state.verdict = Verdict.UNKNOWN
            state.protocol = UNKNOWN
            self.release(state)
        return state.verdict
