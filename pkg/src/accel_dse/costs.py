"""Cost table: per-component energy, power, area and bandwidth."""

from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources
from typing import Mapping

from .arch import Buffer, HardwareDescription, LevelSpec, MemType, Topology, _enum
from .workload import TaskError, load_document


@dataclass(frozen=True)
class MemoryCost:
    read_pj: float
    write_pj: float
    static_uw_per_byte: float
    area_um2_per_byte: float
    read_bandwidth: float
    write_bandwidth: float


@dataclass(frozen=True)
class RoutingCost:
    hop_pj: float
    accumulate_pj: float
    area_um2_per_node: float
    bandwidth: float


@dataclass(frozen=True)
class PECost:
    mac_pj: float
    area_um2: float
    pipeline_stages: int = 1


@dataclass(frozen=True)
class CostTable:
    pe: PECost
    memory: Mapping[MemType, MemoryCost]
    routing: Mapping[Topology, RoutingCost]
    clock_hz: float = 1e9
    multicast_alpha: float = 0.25
    technology: str = ""
    skip_identity_preprocess: bool = True
    passthrough_delay_cycles: int = 0

    def __post_init__(self):
        numbers = [self.pe.mac_pj, self.pe.area_um2, self.multicast_alpha]
        for m in self.memory.values():
            numbers += [m.read_pj, m.write_pj, m.static_uw_per_byte, m.area_um2_per_byte]
            if m.read_bandwidth <= 0 or m.write_bandwidth <= 0:
                raise TaskError("cost table: bandwidths must be positive")
        for r in self.routing.values():
            numbers += [r.hop_pj, r.accumulate_pj, r.area_um2_per_node]
            if r.bandwidth <= 0:
                raise TaskError("cost table: bandwidths must be positive")
        if min(numbers) < 0:
            raise TaskError("cost table: energies, powers and areas must be non-negative")
        if self.clock_hz <= 0 or self.pe.pipeline_stages < 1:
            raise TaskError("cost table: clock and pipeline stages must be positive")

    # per-level views; hardware-level overrides win over the table
    def mem(self, buf: Buffer) -> MemoryCost:
        base = self.memory[buf.mem_type]
        return replace(base,
                       read_bandwidth=buf.read_bandwidth or base.read_bandwidth,
                       write_bandwidth=buf.write_bandwidth or base.write_bandwidth)

    def route(self, lvl: LevelSpec) -> RoutingCost:
        base = self.routing[lvl.topology]
        return replace(base, bandwidth=lvl.bandwidth or base.bandwidth)

    def pipeline_stages(self, hw: HardwareDescription) -> int:
        return hw.compute.pipeline_stages or self.pe.pipeline_stages

    def routing_hop_scale(self, fanout: int) -> float:
        """Multiplier on the hop energy for one multicast to ``fanout`` nodes."""
        return 1.0 + self.multicast_alpha * (fanout - 1)

    def preprocess_bandwidth(self, hw: HardwareDescription) -> float:
        """Elements per cycle available to preprocessing (outermost memory)."""
        buf = hw.levels[-1].buffers[0]
        return self.mem(buf).write_bandwidth

    def scaled(self, **changes) -> "CostTable":
        return replace(self, **changes)


def _section(doc: Mapping, key: str) -> Mapping:
    val = doc.get(key)
    if not isinstance(val, Mapping):
        raise TaskError(f"cost table needs a '{key}' section")
    return val


def parse_costs(text: "str | Mapping") -> CostTable:
    doc = load_document(text) if isinstance(text, str) else dict(text)
    if not isinstance(doc, Mapping):
        raise TaskError("cost table must be a mapping")
    try:
        pe = PECost(**{k: v for k, v in _section(doc, "pe").items()})
        memory = {_enum(MemType, k): MemoryCost(**v) for k, v in _section(doc, "memory").items()}
        routing = {_enum(Topology, k): RoutingCost(**v) for k, v in _section(doc, "routing").items()}
    except TypeError as exc:
        raise TaskError(f"cost table: {exc}") from None
    missing = [t.value for t in MemType if t not in memory] + [t.value for t in Topology if t not in routing]
    if missing:
        raise TaskError(f"cost table lacks entries for {', '.join(missing)}")
    return CostTable(pe=pe, memory=memory, routing=routing,
                     clock_hz=float(doc.get("clock_hz", 1e9)),
                     multicast_alpha=float(doc.get("multicast_alpha", 0.25)),
                     technology=str(doc.get("technology", "")),
                     skip_identity_preprocess=bool(doc.get("skip_identity_preprocess", True)),
                     passthrough_delay_cycles=int(doc.get("passthrough_delay_cycles", 0)))


def default_costs() -> CostTable:
    text = resources.files("accel_dse").joinpath("data/costs.yaml").read_text()
    return parse_costs(text)
