"""Mapping representation, tile footprints and the mapping validator."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from math import prod

from .arch import HardwareDescription, LevelKind, MemType
from .workload import DIMS, TENSORS, IntraLayerWorkload

OUTPUT_DIMS = frozenset("NMEF")


class SubKind(str, enum.Enum):
    TEMPORAL = "Temporal"
    SPATIAL = "Spatial"
    COMPUTE = "Compute"


@dataclass(frozen=True)
class Loop:
    dim: str
    bound: int
    axis: str | None = None  # "x"/"y" on spatial levels


@dataclass(frozen=True)
class SubMapping:
    level: str
    kind: SubKind
    loops: tuple[Loop, ...] = ()


@dataclass(frozen=True)
class Mapping:
    """One projection of a workload onto a hardware description.

    ``subs`` has one entry per hardware level, outermost first. Loops with
    bound 1 are omitted. ``bypass`` holds ``(level_name, tensor)`` pairs that
    store nothing at that level.
    """

    workload: IntraLayerWorkload
    subs: tuple[SubMapping, ...]
    bypass: frozenset = frozenset()
    key: tuple = field(default=(), compare=False, hash=False)

    def sub(self, level: str) -> SubMapping:
        for s in self.subs:
            if s.level == level:
                return s
        raise KeyError(level)

    def dim_product(self, dim: str) -> int:
        return prod(l.bound for s in self.subs for l in s.loops if l.dim == dim)

    @property
    def spatial_product(self) -> int:
        return prod(l.bound for s in self.subs if s.kind is SubKind.SPATIAL for l in s.loops)

    def describe(self) -> str:
        lines = []
        depth = 0
        for s in self.subs:
            lines.append("  " * depth + f"# {s.level}")
            for l in s.loops:
                kw = "parallel for" if s.kind is SubKind.SPATIAL else "for"
                ax = f"  @ {l.axis}-axis" if l.axis else ""
                lines.append("  " * depth + f"{kw} {l.dim.lower()} in 0..{l.bound}{ax}")
                depth += 1
        bp = ", ".join(f"{t}@{lv}" for lv, t in sorted(self.bypass))
        if bp:
            lines.append(f"# bypass: {bp}")
        return "\n".join(lines)

    def compact(self) -> str:
        """One-line form, e.g. ``DRAM[M=4] NoC[C=2@x] SP[M=8 C=16] bypass[inputs@Gbuf]``."""
        parts = []
        for s in self.subs:
            if s.loops:
                parts.append(f"{s.level}[" + " ".join(
                    f"{l.dim}={l.bound}" + (f"@{l.axis}" if l.axis else "") for l in s.loops) + "]")
        if self.bypass:
            parts.append("bypass[" + " ".join(f"{t}@{lv}" for lv, t in sorted(self.bypass)) + "]")
        return " ".join(parts) or "(all bounds 1)"

    def to_doc(self) -> dict:
        """Mapping-file document accepted by :func:`parse_mapping`."""
        doc = {"mapping": [{"level": s.level, "loops": [
            f"{l.dim}={l.bound}" + (f"@{l.axis}" if l.axis else "") for l in s.loops]}
            for s in self.subs if s.kind is not SubKind.COMPUTE]}
        if self.bypass:
            doc["bypass"] = [f"{lv}.{t}" for lv, t in sorted(self.bypass)]
        return doc


def level_subs(m: Mapping, hw: HardwareDescription) -> list[SubMapping]:
    """Sub-mappings aligned with ``hw.levels`` (innermost first)."""
    by_name = {s.level: s for s in m.subs}
    return [by_name.get(l.name, SubMapping(l.name, SubKind.COMPUTE)) for l in hw.levels]


def tensor_axes(w: IntraLayerWorkload, tensor: str) -> list[dict[str, int]]:
    """Each tensor coordinate as {dim: coefficient}; inputs slide by the stride."""
    u, v = w.strides
    if tensor == "inputs":
        ch = {"M": 1} if w.depthwise else {"C": 1}
        return [{"N": 1}, ch, {"E": u, "R": 1}, {"F": v, "S": 1}]
    if tensor == "filters":
        axes = [{"R": 1}, {"S": 1}, {"M": 1}]
        if not w.depthwise:
            axes.insert(2, {"C": 1})
        return axes
    if tensor == "outputs":
        return [{"N": 1}, {"E": 1}, {"F": 1}, {"M": 1}]
    raise KeyError(tensor)


def relevant_dims(w: IntraLayerWorkload, tensor: str) -> frozenset:
    return frozenset(d for axis in tensor_axes(w, tensor) for d in axis)


def box_elements(w: IntraLayerWorkload, tensor: str, extents: dict[str, int]) -> int:
    """Elements of the halo-inclusive box spanned by per-dim loop extents."""
    total = 1
    for axis in tensor_axes(w, tensor):
        total *= 1 + sum(c * (extents.get(d, 1) - 1) for d, c in axis.items())
    return total


def inner_extents(m: Mapping, hw: HardwareDescription, level_index: int) -> dict[str, int]:
    """Per-dim product of loop bounds at ``level_index`` and every inner level."""
    ext = {d: 1 for d in DIMS}
    for s in level_subs(m, hw)[:level_index + 1]:
        for l in s.loops:
            ext[l.dim] *= l.bound
    return ext


def required_footprint(m: Mapping, hw: HardwareDescription, level: str, tensor: str) -> float:
    """Bytes of ``tensor`` resident at ``level`` (per instance)."""
    if (level, tensor) in m.bypass:
        return 0
    idx = hw.index(level)
    return box_elements(m.workload, tensor, inner_extents(m, hw, idx)) * hw.element_bytes


def pe_utilization(m: Mapping, hw: HardwareDescription) -> float:
    return m.spatial_product / hw.pe_count


def inner_memory_index(hw: HardwareDescription) -> int:
    """Innermost non-register memory if one exists, else the register level."""
    mems = hw.memory_indices
    for i in mems:
        if all(b.mem_type is not MemType.REGISTER for b in hw.levels[i].buffers):
            return i
    return mems[0]


def inner_memory_utilization(m: Mapping, hw: HardwareDescription) -> float:
    idx = inner_memory_index(hw)
    lvl = hw.levels[idx]
    if lvl.size is None:
        return 1.0
    used = sum(required_footprint(m, hw, lvl.name, t) for t in TENSORS)
    return used / lvl.size


@dataclass(frozen=True)
class Violation:
    level: str
    overflow: float
    reason: str

    def __str__(self):
        return f"{self.level}: {self.reason} (over by {self.overflow:g})"


def check_level(m: Mapping, hw: HardwareDescription, level_index: int,
                live_cache_bytes: dict[str, float] | None = None) -> Violation | None:
    """Capacity/grid check of one level; relies only on loops at or inside it."""
    lvl = hw.levels[level_index]
    if lvl.kind is LevelKind.MEMORY:
        cache = (live_cache_bytes or {}).get(lvl.name, 0)
        for b in lvl.buffers:
            if b.size is None:
                continue
            used = sum(required_footprint(m, hw, lvl.name, t) for t in sorted(b.usage))
            # caches are charged to the first buffer holding inputs (activations)
            if "inputs" in b.usage:
                used += cache
            if used > b.size:
                return Violation(lvl.name, used - b.size, f"buffer {b.name} capacity")
    elif lvl.kind is LevelKind.ROUTING:
        sub = level_subs(m, hw)[level_index]
        for axis, cap in zip("xy", lvl.routing_size):
            span = prod(l.bound for l in sub.loops if l.axis == axis)
            if span > cap:
                return Violation(lvl.name, span - cap, f"spatial {axis}-axis exceeds routing size")
    return None


def validate_mapping(m: Mapping, hw: HardwareDescription,
                     live_cache_bytes: dict[str, float] | None = None) -> Violation | None:
    """``None`` when valid, else the first violated level and the overflow."""
    w = m.workload
    for d in DIMS:
        if m.dim_product(d) != w.bound(d):
            return Violation("-", abs(m.dim_product(d) - w.bound(d)), f"factorization of {d}")
    for i in range(len(hw.levels)):
        v = check_level(m, hw, i, live_cache_bytes)
        if v is not None:
            return v
    active = m.spatial_product
    if active > hw.pe_count:
        return Violation(hw.compute.name, active - hw.pe_count, "active PEs exceed pe_count")
    return None


def _parse_loop(item, spatial: bool) -> Loop:
    """``"M=4"`` or ``"C=2@x"`` (also ``{dim, bound, axis}`` mappings)."""
    if isinstance(item, dict):
        dim, bound, axis = item["dim"], item["bound"], item.get("axis")
    else:
        text = str(item).replace(" ", "")
        head, _, axis = text.partition("@")
        dim, _, bound = head.partition("=")
        axis = axis or None
    dim = str(dim).upper()
    if dim not in DIMS:
        raise ValueError(f"unknown loop dimension {dim!r}")
    if spatial and axis not in ("x", "y"):
        raise ValueError(f"spatial loop {item!r} needs an @x or @y axis")
    return Loop(dim, int(bound), axis if spatial else None)


def parse_mapping(doc, workload: IntraLayerWorkload, hw: HardwareDescription) -> Mapping:
    """Build a mapping from a document with ``mapping`` (per level, outermost
    first, each ``{level, loops}``) and an optional ``bypass`` list of
    ``"<level>.<tensor>"`` entries. Unlisted levels get no loops."""
    given = {}
    for entry in doc.get("mapping") or []:
        name = str(entry["level"])
        lvl = hw.level(name)
        spatial = lvl.kind is LevelKind.ROUTING
        given[name] = tuple(l for l in (_parse_loop(x, spatial) for x in entry.get("loops") or [])
                            if l.bound > 1)
    subs = []
    for lvl in reversed(hw.levels):
        kind = {LevelKind.MEMORY: SubKind.TEMPORAL, LevelKind.ROUTING: SubKind.SPATIAL,
                LevelKind.COMPUTE: SubKind.COMPUTE}[lvl.kind]
        loops = given.get(lvl.name, ())
        if kind is SubKind.COMPUTE and loops:
            raise ValueError("the compute level takes no loops")
        if kind is SubKind.TEMPORAL and len({l.dim for l in loops}) != len(loops):
            raise ValueError(f"level {lvl.name} repeats a dimension")
        if kind is SubKind.SPATIAL:
            loops = tuple(sorted(loops, key=lambda l: (l.axis, DIMS.index(l.dim))))
        subs.append(SubMapping(lvl.name, kind, loops))
    bypass = set()
    for item in doc.get("bypass") or []:
        level, _, tensor = str(item).rpartition(".")
        if tensor not in TENSORS:
            raise ValueError(f"bad bypass entry {item!r}")
        hw.level(level)
        bypass.add((level, tensor))
    return Mapping(workload, tuple(subs), frozenset(bypass))
