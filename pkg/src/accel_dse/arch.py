"""Hardware template, parameter sweeps and the architecture space.

A hardware description is an ordered list of levels from the compute level
(innermost) out to main memory. Memory levels hold one shared buffer or
several parallel buffers that split the three tensors between them; routing
levels connect an outer memory to many instances of the memory below.
"""

from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Mapping

from .workload import TENSORS, TaskError, load_document


class HardwareError(ValueError):
    """Structurally invalid hardware description."""


class LevelKind(str, enum.Enum):
    COMPUTE = "Compute"
    MEMORY = "Memory"
    ROUTING = "Routing"


class MemType(str, enum.Enum):
    REGISTER = "Register"
    SCRATCHPAD = "Scratchpad"
    SRAM = "SRAM"
    DRAM = "DRAM"


class Topology(str, enum.Enum):
    BUS = "Bus"
    TWO_LEVEL_BUS = "TwoLevelBus"
    MESH = "Mesh"


_USAGE = {
    "inputs": frozenset({"inputs"}),
    "filters": frozenset({"filters"}),
    "outputs": frozenset({"outputs"}),
    "shared": frozenset(TENSORS),
}


@dataclass(frozen=True)
class Buffer:
    name: str
    mem_type: MemType
    size: int | None  # bytes; None means unbounded
    usage: frozenset = frozenset(TENSORS)
    read_bandwidth: float | None = None  # elements/cycle, None -> cost table
    write_bandwidth: float | None = None
    ports: int = 1


@dataclass(frozen=True)
class LevelSpec:
    name: str
    kind: LevelKind
    pe_count: int | None = None
    pipeline_stages: int | None = None
    buffers: tuple[Buffer, ...] = ()
    topology: Topology | None = None
    routing_size: tuple[int, int] | None = None
    bandwidth: float | None = None  # routing: elements/cycle

    # single-buffer conveniences
    @property
    def mem_type(self) -> MemType:
        return self.buffers[0].mem_type

    @property
    def size(self) -> int | None:
        if any(b.size is None for b in self.buffers):
            return None
        return sum(b.size for b in self.buffers)

    def buffer_for(self, tensor: str) -> Buffer:
        for b in self.buffers:
            if tensor in b.usage:
                return b
        raise KeyError(f"level {self.name} has no buffer for {tensor}")


@dataclass(frozen=True)
class HardwareDescription:
    precision_bits: int
    levels: tuple[LevelSpec, ...]
    name: str = "arch"
    # level charged with live activation caches; default is the outermost level
    cache_level: str | None = None
    params: tuple[tuple[str, Any], ...] = ()

    @property
    def element_bytes(self) -> float:
        return self.precision_bits / 8

    @property
    def compute(self) -> LevelSpec:
        return self.levels[0]

    @property
    def pe_count(self) -> int:
        return self.levels[0].pe_count

    def index(self, name: str) -> int:
        for i, lvl in enumerate(self.levels):
            if lvl.name == name:
                return i
        raise KeyError(name)

    def level(self, name: str) -> LevelSpec:
        return self.levels[self.index(name)]

    @property
    def memory_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.levels) if l.kind is LevelKind.MEMORY]

    @property
    def cache_index(self) -> int:
        if self.cache_level is None:
            return len(self.levels) - 1
        return self.index(self.cache_level)

    @property
    def skip_index(self) -> int:
        """Outermost bounded memory level (the default zero-skip boundary)."""
        bounded = [i for i in self.memory_indices if self.levels[i].size is not None]
        return bounded[-1] if bounded else self.memory_indices[0]


def validate_description(hw: HardwareDescription) -> None:
    """Raise :class:`HardwareError` naming the first violated structural rule."""
    levels = hw.levels
    if not levels:
        raise HardwareError("empty level list")
    if hw.precision_bits < 1:
        raise HardwareError("precision must be positive")
    computes = [i for i, l in enumerate(levels) if l.kind is LevelKind.COMPUTE]
    if computes != [0]:
        raise HardwareError("compute-not-innermost: exactly one compute level, innermost")
    if levels[0].pe_count is None or levels[0].pe_count < 1:
        raise HardwareError("compute level needs pe_count >= 1")
    if levels[-1].kind is not LevelKind.MEMORY:
        raise HardwareError("outermost level must be a memory level")
    if len(levels) < 2 or levels[1].kind is not LevelKind.MEMORY:
        raise HardwareError("compute level must sit directly under a memory level")
    names = [l.name for l in levels]
    if len(set(names)) != len(names):
        raise HardwareError("level names must be unique")
    for i, lvl in enumerate(levels):
        if lvl.kind is LevelKind.ROUTING:
            if not (0 < i < len(levels) - 1
                    and levels[i - 1].kind is LevelKind.MEMORY
                    and levels[i + 1].kind is LevelKind.MEMORY):
                raise HardwareError(f"dangling routing level {lvl.name}: needs memory on both sides")
            x, y = lvl.routing_size
            if x < 1 or y < 1:
                raise HardwareError(f"routing level {lvl.name} needs a positive grid")
            if lvl.bandwidth is not None and lvl.bandwidth <= 0:
                raise HardwareError(f"routing level {lvl.name}: bandwidth must be positive")
        elif lvl.kind is LevelKind.MEMORY:
            if not lvl.buffers:
                raise HardwareError(f"memory level {lvl.name} has no buffers")
            covered = [t for b in lvl.buffers for t in sorted(b.usage)]
            if sorted(covered) != sorted(TENSORS):
                raise HardwareError(
                    f"usage sets at {lvl.name} are not a partition of inputs/filters/outputs")
            for b in lvl.buffers:
                if b.size is None and i != len(levels) - 1:
                    raise HardwareError(f"only the outermost level may be unbounded ({b.name})")
                if b.size is not None and b.size <= 0:
                    raise HardwareError(f"buffer {b.name} must have positive size")
                for bw in (b.read_bandwidth, b.write_bandwidth):
                    if bw is not None and bw <= 0:
                        raise HardwareError(f"buffer {b.name}: bandwidth must be positive")
    if hw.cache_level is not None:
        idx = hw.index(hw.cache_level)
        if levels[idx].kind is not LevelKind.MEMORY:
            raise HardwareError("cache level must be a memory level")


# --------------------------------------------------------------------------
# sweeps

_SIZE_RE = re.compile(r"^\s*([0-9.]+)\s*([kKmMgG]?)[bB]?\s*$")


def parse_size(value: Any) -> int | None:
    """Bytes from ints or strings like ``"108K"``; ``None``/``"N/A"`` is unbounded."""
    if value is None or (isinstance(value, str) and value.strip().upper() in ("N/A", "NONE", "INF")):
        return None
    if isinstance(value, (int, float)):
        return int(value)
    m = _SIZE_RE.match(str(value))
    if not m:
        raise TaskError(f"bad memory size {value!r}")
    scale = {"": 1, "k": 1024, "m": 1024 ** 2, "g": 1024 ** 3}[m.group(2).lower()]
    return int(float(m.group(1)) * scale)


def _enum(cls, value: str):
    key = re.sub(r"[^a-z0-9]", "", str(value).lower())
    for member in cls:
        if re.sub(r"[^a-z0-9]", "", member.value.lower()) == key:
            return member
    raise TaskError(f"unknown {cls.__name__} {value!r}")


@dataclass
class ParameterSweep:
    """A hardware template whose leaves are candidate-value lists.

    ``axes`` lists (path, values) in document order; ``template`` is the parsed
    document with every swept leaf still a list.
    """

    template: dict
    axes: list[tuple[tuple, list]] = field(default_factory=list)
    name: str = "arch"
    mode: str = "product"

    def __post_init__(self):
        for path, values in self.axes:
            if not values:
                raise TaskError(f"empty candidate list for {'.'.join(map(str, path))}")
        if self.mode == "zip":
            lengths = {len(v) for _, v in self.axes if len(v) > 1}
            if len(lengths) > 1:
                raise TaskError("zip sweep needs equal-length lists")

    def points(self) -> Iterator[dict]:
        if not self.axes:
            yield {}
            return
        if self.mode == "zip":
            n = max(len(v) for _, v in self.axes)
            for i in range(n):
                yield {p: (v[i] if len(v) > 1 else v[0]) for p, v in self.axes}
            return
        paths = [p for p, _ in self.axes]
        for combo in itertools.product(*(v for _, v in self.axes)):
            yield dict(zip(paths, combo))

    def __len__(self) -> int:
        if self.mode == "zip":
            return max((len(v) for _, v in self.axes), default=1)
        n = 1
        for _, v in self.axes:
            n *= len(v)
        return n


# fields whose value is itself a pair; a sweep over them is a list of pairs
_PAIR_FIELDS = {"routing_size"}
_SWEEPABLE = {"precision_bits", "pe_count", "pipeline_stages", "size", "routing_size",
              "mem_type", "topology", "read_bandwidth", "write_bandwidth", "bandwidth", "ports"}


def _as_candidates(key: str, value: Any) -> list:
    if key in _PAIR_FIELDS:
        if isinstance(value, (list, tuple)) and value and isinstance(value[0], (list, tuple)):
            return [tuple(v) for v in value]
        return [tuple(value) if isinstance(value, (list, tuple)) else (value, 1)]
    if isinstance(value, list):
        return value
    return [value]


def parse_sweep(text: str | Mapping) -> ParameterSweep:
    doc = load_document(text) if isinstance(text, str) else dict(text)
    if not isinstance(doc, Mapping) or "levels" not in doc:
        raise TaskError("hardware file needs a 'levels' list")
    if not doc["levels"]:
        raise TaskError("empty level list")
    axes: list[tuple[tuple, list]] = []

    def walk(node: Any, path: tuple):
        if isinstance(node, Mapping):
            for k, v in node.items():
                if k in _SWEEPABLE:
                    axes.append((path + (k,), _as_candidates(k, v)))
                else:
                    walk(v, path + (k,))
        elif isinstance(node, list):
            for i, v in enumerate(node):
                walk(v, path + (i,))

    walk({"precision_bits": doc.get("precision_bits", 16), "levels": doc["levels"]}, ())
    return ParameterSweep(template=dict(doc), axes=axes, name=str(doc.get("name", "arch")),
                          mode=str(doc.get("sweep_mode", "product")))


def _get(point: dict, path: tuple, default=None):
    return point.get(path, default)


def _build(sweep: ParameterSweep, point: dict, index: int) -> HardwareDescription:
    levels = []
    for li, raw in enumerate(sweep.template["levels"]):
        kind = _enum(LevelKind, raw.get("kind", "memory"))
        name = str(raw.get("name", f"L{li}"))
        base = ("levels", li)
        if kind is LevelKind.COMPUTE:
            levels.append(LevelSpec(name, kind,
                                    pe_count=int(_get(point, base + ("pe_count",), 1)),
                                    pipeline_stages=_opt_int(_get(point, base + ("pipeline_stages",)))))
        elif kind is LevelKind.ROUTING:
            size = _get(point, base + ("routing_size",), (1, 1))
            levels.append(LevelSpec(name, kind,
                                    topology=_enum(Topology, _get(point, base + ("topology",), "bus")),
                                    routing_size=(int(size[0]), int(size[1])),
                                    bandwidth=_opt_float(_get(point, base + ("bandwidth",)))))
        else:
            specs = raw.get("buffers")
            if specs is None:
                specs, paths = [raw], [base]
            else:
                paths = [base + ("buffers", bi) for bi in range(len(specs))]
            buffers = []
            for bi, (spec, path) in enumerate(zip(specs, paths)):
                usage = str(spec.get("usage", "shared")).lower()
                if usage not in _USAGE:
                    raise TaskError(f"unknown usage {usage!r}")
                buffers.append(Buffer(
                    name=str(spec.get("name", name if len(specs) == 1 else f"{name}.{usage}")),
                    mem_type=_enum(MemType, _get(point, path + ("mem_type",), "sram")),
                    size=parse_size(_get(point, path + ("size",))),
                    usage=_USAGE[usage],
                    read_bandwidth=_opt_float(_get(point, path + ("read_bandwidth",))),
                    write_bandwidth=_opt_float(_get(point, path + ("write_bandwidth",))),
                    ports=int(_get(point, path + ("ports",), 1) or 1)))
            levels.append(LevelSpec(name, kind, buffers=tuple(buffers)))
    params = tuple((".".join(_label(sweep, p)), _plain(v)) for p, v in point.items()
                   if len(dict(sweep.axes)[p]) > 1)
    return HardwareDescription(precision_bits=int(point.get(("precision_bits",), 16)),
                               levels=tuple(levels), name=f"{sweep.name}-{index}",
                               cache_level=sweep.template.get("cache_level"), params=params)


def _label(sweep: ParameterSweep, path: tuple) -> list[str]:
    out = []
    node: Any = {"levels": sweep.template["levels"]}
    for p in path:
        if isinstance(p, int):
            node = node[p]
            out.append(str(node.get("name", p)) if isinstance(node, Mapping) else str(p))
        else:
            if p != "levels" and p != "buffers":
                out.append(p)
            node = node.get(p) if isinstance(node, Mapping) else None
    return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _opt_int(v):
    return None if v is None else int(v)


def _opt_float(v):
    return None if v is None else float(v)


def enumerate_architectures(sweep: ParameterSweep,
                            rejects: list | None = None) -> Iterator[HardwareDescription]:
    """Yield every structurally valid point of the sweep in deterministic order.

    Invalid combinations are skipped; when ``rejects`` is given, a
    ``(name, reason)`` pair is appended for each.
    """
    for index, point in enumerate(sweep.points()):
        try:
            hw = _build(sweep, point, index)
            validate_description(hw)
        except (HardwareError, TaskError, KeyError) as exc:
            if rejects is not None:
                rejects.append((f"{sweep.name}-{index}", str(exc)))
            continue
        yield hw


def with_levels(hw: HardwareDescription, **changes) -> HardwareDescription:
    return replace(hw, **changes)
