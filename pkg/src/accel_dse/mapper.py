"""Mapspace construction, validation and pruning.

Mappings are built by splitting every loop bound into exact divisors across
the mapping slots (one temporal slot per memory level, an x and a y slot per
routing level), then choosing a loop order for each temporal level and a set
of bypassed (level, tensor) pairs. Validity and utilization do not depend on
loop order, so both are decided per factor assignment and order expansion is
deferred until a skeleton survives.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import prod
from typing import Iterator, Mapping as TMapping

from .arch import HardwareDescription, LevelKind, MemType
from .goals import DesignGoal
from .mapping import (Loop, Mapping, SubKind, SubMapping, box_elements,
                      inner_memory_index, validate_mapping)
from .workload import DIMS, TENSORS, IntraLayerWorkload, TaskError, load_document


@dataclass(frozen=True)
class MappingConstraints:
    """User constraints on the mapspace.

    ``pins``: (dim, level, position) -- the dim's loop sits at that position
    (0 outermost, -1 innermost) of the level's loop order.
    ``factors``: (dim, slot, bound) -- fixed bound of a dim at a slot; slots are
    memory level names or ``"<routing>.x"`` / ``"<routing>.y"``.
    ``factor_lists``: (dim, allowed bounds) -- every loop of the dim, at any
    slot, takes a bound from the list (1, meaning no loop, is always allowed).
    """

    pins: tuple[tuple[str, str, int], ...] = ()
    factors: tuple[tuple[str, str, int], ...] = ()
    factor_lists: tuple[tuple[str, tuple[int, ...]], ...] = ()
    pe_utilization_min: float = 0.75
    inner_memory_utilization_min: float = 0.5
    bypass: bool = True

    def __post_init__(self):
        for t in (self.pe_utilization_min, self.inner_memory_utilization_min):
            if not 0.0 <= t <= 1.0:
                raise ValueError("utilization thresholds must lie in [0, 1]")
        for d, *_ in self.pins + self.factors + self.factor_lists:
            if d not in DIMS:
                raise ValueError(f"unknown dimension {d!r}")

    def allowed(self, dim: str) -> frozenset | None:
        """Allowed loop bounds for ``dim``, or None when unrestricted."""
        for d, bounds in self.factor_lists:
            if d == dim:
                return frozenset(bounds) | {1}
        return None

    @classmethod
    def parse(cls, text: "str | TMapping | None") -> "MappingConstraints":
        if text is None:
            return cls()
        doc = load_document(text) if isinstance(text, str) else dict(text)
        doc = doc or {}
        pins = []
        for dim, spec in (doc.get("pins") or {}).items():
            pins.append((str(dim).upper(), str(spec["level"]), int(spec.get("position", 0))))
        factors, lists = [], []
        for dim, spec in (doc.get("factors") or {}).items():
            if isinstance(spec, (list, tuple)):
                lists.append((str(dim).upper(), tuple(sorted({int(b) for b in spec} | {1}))))
                continue
            for slot, bound in dict(spec).items():
                factors.append((str(dim).upper(), str(slot), int(bound)))
        try:
            return cls(pins=tuple(pins), factors=tuple(factors), factor_lists=tuple(lists),
                       pe_utilization_min=float(doc.get("pe_util_min", 0.75)),
                       inner_memory_utilization_min=float(doc.get("mem_util_min", 0.5)),
                       bypass=bool(doc.get("bypass", True)))
        except ValueError as exc:
            raise TaskError(str(exc)) from None


@dataclass(frozen=True)
class Slot:
    level_index: int
    name: str  # level name, or "<level>.x" / "<level>.y"
    spatial: bool
    axis: str | None = None


def mapping_slots(hw: HardwareDescription) -> list[Slot]:
    """Slots from outermost to innermost."""
    slots = []
    for i in reversed(range(len(hw.levels))):
        lvl = hw.levels[i]
        if lvl.kind is LevelKind.MEMORY:
            slots.append(Slot(i, lvl.name, False))
        elif lvl.kind is LevelKind.ROUTING:
            slots.append(Slot(i, f"{lvl.name}.x", True, "x"))
            slots.append(Slot(i, f"{lvl.name}.y", True, "y"))
    return slots


def bypass_candidates(hw: HardwareDescription) -> list[tuple[str, str]]:
    """(level, tensor) pairs that may be bypassed: intermediate, non-register memories."""
    mems = hw.memory_indices
    out = []
    for i in mems[1:-1]:
        lvl = hw.levels[i]
        if any(b.mem_type is MemType.REGISTER for b in lvl.buffers):
            continue
        out.extend((lvl.name, t) for t in TENSORS)
    return out


def bypass_combinations(hw: HardwareDescription, c: MappingConstraints) -> list[frozenset]:
    cands = bypass_candidates(hw) if c.bypass else []
    combos = []
    for flags in itertools.product((False, True), repeat=len(cands)):
        combos.append(frozenset(p for p, f in zip(cands, flags) if f))
    return combos


@lru_cache(maxsize=None)
def _divisors(n: int) -> tuple[int, ...]:
    return tuple(d for d in range(1, n + 1) if n % d == 0)


def _fixed_factors(c: MappingConstraints, slots: list[Slot]) -> dict[tuple[str, int], int]:
    index = {s.name: k for k, s in enumerate(slots)}
    fixed = {}
    for dim, slot, bound in c.factors:
        if slot not in index:
            raise ValueError(f"factor constraint names unknown slot {slot!r}")
        fixed[(dim, index[slot])] = bound
    return fixed


def _order_count(level: str, dims: tuple[str, ...], pins: tuple) -> int:
    return sum(1 for _ in _orders(level, dims, pins))


def _orders(level: str, dims: tuple[str, ...], pins: tuple) -> Iterator[tuple[str, ...]]:
    rules = [(d, pos) for d, lv, pos in pins if lv == level]
    for perm in itertools.permutations(dims):
        ok = True
        for d, pos in rules:
            if d not in perm:
                ok = False
                break
            p = pos if pos >= 0 else len(perm) + pos
            if not 0 <= p < len(perm) or perm[p] != d:
                ok = False
                break
        if ok:
            yield perm


@dataclass
class Skeleton:
    """A factor assignment plus bypass choice; loop orders still open."""

    workload: IntraLayerWorkload
    hw: HardwareDescription
    slots: list[Slot]
    factors: tuple[tuple[int, ...], ...]  # per slot, per dim
    bypass: frozenset
    key: tuple
    pins: tuple = ()

    def temporal_levels(self) -> list[tuple[str, tuple[str, ...]]]:
        """(level name, non-trivial dims in DIMS order) for each temporal slot."""
        out = []
        for s, facs in zip(self.slots, self.factors):
            if not s.spatial:
                out.append((s.name, tuple(d for d, f in zip(DIMS, facs) if f > 1)))
        return out

    def order_choices(self) -> list[list[tuple[str, ...]]]:
        return [list(_orders(name, dims, self.pins)) for name, dims in self.temporal_levels()]

    def order_count(self) -> int:
        return prod(len(ch) for ch in self.order_choices())

    def mapping(self, orders: tuple[tuple[str, ...], ...], order_key: tuple = ()) -> Mapping:
        hw = self.hw
        fac = {s.name: dict(zip(DIMS, f)) for s, f in zip(self.slots, self.factors)}
        order_iter = iter(orders)
        subs = []
        for i in reversed(range(len(hw.levels))):
            lvl = hw.levels[i]
            if lvl.kind is LevelKind.MEMORY:
                f = fac[lvl.name]
                subs.append(SubMapping(lvl.name, SubKind.TEMPORAL,
                                       tuple(Loop(d, f[d]) for d in next(order_iter))))
            elif lvl.kind is LevelKind.ROUTING:
                loops = []
                for axis in "xy":
                    f = fac[f"{lvl.name}.{axis}"]
                    loops.extend(Loop(d, f[d], axis) for d in DIMS if f[d] > 1)
                subs.append(SubMapping(lvl.name, SubKind.SPATIAL, tuple(loops)))
            else:
                subs.append(SubMapping(lvl.name, SubKind.COMPUTE))
        return Mapping(self.workload, tuple(subs), self.bypass, key=self.key + (order_key,))

    def mappings(self) -> Iterator[Mapping]:
        choices = self.order_choices()
        for idx in itertools.product(*(range(len(ch)) for ch in choices)):
            yield self.mapping(tuple(ch[i] for ch, i in zip(choices, idx)), idx)


def _factor_assignments(w: IntraLayerWorkload, hw: HardwareDescription, c: MappingConstraints,
                        slots: list[Slot], check=None) -> Iterator[tuple[tuple[int, ...], ...]]:
    """Depth-first over slots from innermost to outermost; ``check(k, assign)``
    is called after slot ``k`` is filled and may cut the subtree."""
    n = len(slots)
    fixed = _fixed_factors(c, slots)
    allowed = {d: c.allowed(d) for d in DIMS}
    assign: list = [None] * n

    def options(k: int, remaining: tuple[int, ...]):
        opts = []
        for di, dim in enumerate(DIMS):
            f = fixed.get((dim, k))
            if k == 0:
                cand = (remaining[di],) if f is None or f == remaining[di] else ()
            elif f is not None:
                cand = (f,) if remaining[di] % f == 0 else ()
            else:
                cand = _divisors(remaining[di])
            if allowed[dim] is not None:
                cand = tuple(x for x in cand if x in allowed[dim])
            opts.append(cand)
        return opts

    def rec(k: int, remaining: tuple[int, ...]):
        for facs in itertools.product(*options(k, remaining)):
            assign[k] = facs
            if check is not None and not check(k, assign):
                continue
            if k == 0:
                yield tuple(assign)
            else:
                yield from rec(k - 1, tuple(r // f for r, f in zip(remaining, facs)))

    yield from rec(n - 1, tuple(w.bounds))


def _dfs_key(facs: tuple) -> tuple:
    """Sort key equal to the depth-first construction order (innermost slot first)."""
    return tuple(reversed(facs))


def construct_mappings(w: IntraLayerWorkload, hw: HardwareDescription,
                       c: MappingConstraints | None = None) -> Iterator[Mapping]:
    """Every mapping of ``w`` onto ``hw`` respecting pins and custom factors,
    without any validity filtering. Deterministic order."""
    c = c or MappingConstraints()
    slots = mapping_slots(hw)
    for bi, bypass in enumerate(bypass_combinations(hw, c)):
        for facs in _factor_assignments(w, hw, c, slots):
            yield from Skeleton(w, hw, slots, facs, bypass, (bi, _dfs_key(facs)), c.pins).mappings()


def count_mappings(w: IntraLayerWorkload, hw: HardwareDescription,
                   c: MappingConstraints | None = None) -> int:
    """Size of :func:`construct_mappings` computed without enumerating it."""
    c = c or MappingConstraints()
    slots = mapping_slots(hw)
    n = len(slots)
    fixed = _fixed_factors(c, slots)
    temporal = [k for k, s in enumerate(slots) if not s.spatial]

    def dim_factorizations(di: int) -> list[tuple[int, ...]]:
        dim = DIMS[di]
        ok = c.allowed(dim)
        out = []

        def rec(k: int, rem: int, acc: tuple):
            if k == 0:
                f = fixed.get((dim, 0))
                if (f is None or f == rem) and (ok is None or rem in ok):
                    out.append((rem,) + acc)
                return
            f = fixed.get((dim, k))
            for d in ((f,) if f is not None else _divisors(rem)):
                if rem % d == 0 and (ok is None or d in ok):
                    rec(k - 1, rem // d, (d,) + acc)

        rec(n - 1, w.bounds[di], ())
        return out

    # state: per temporal slot, the tuple of non-trivial dims so far
    states: dict[tuple, int] = {tuple(() for _ in temporal): 1}
    for di, dim in enumerate(DIMS):
        nxt: dict[tuple, int] = {}
        for fz in dim_factorizations(di):
            for st, cnt in states.items():
                new = tuple(s + ((dim,) if fz[k] > 1 else ()) for s, k in zip(st, temporal))
                nxt[new] = nxt.get(new, 0) + cnt
        states = nxt
    total = 0
    for st, cnt in states.items():
        weight = 1
        for dims, k in zip(st, temporal):
            weight *= _order_count(slots[k].name, dims, c.pins)
            if weight == 0:
                break
        total += cnt * weight
    return total * len(bypass_combinations(hw, c))


def _validity_check(w: IntraLayerWorkload, hw: HardwareDescription, slots: list[Slot],
                    bypass: frozenset, live_cache_bytes: dict | None):
    """Per-slot check equivalent to :func:`validate_mapping` on the finished mapping."""
    eb = hw.element_bytes
    live = live_cache_bytes or {}
    pe_count = hw.pe_count
    x_slot = {k: k + 1 for k, s in enumerate(slots) if s.spatial and s.axis == "x"}

    def check(k: int, assign: list) -> bool:
        s = slots[k]
        if s.spatial:
            if s.axis == "y":
                return True
            lvl = hw.levels[s.level_index]
            if prod(assign[k]) > lvl.routing_size[0] or prod(assign[x_slot[k]]) > lvl.routing_size[1]:
                return False
            spatial = prod(prod(assign[j]) for j in range(k, len(slots)) if slots[j].spatial)
            return spatial <= pe_count
        lvl = hw.levels[s.level_index]
        ext = {d: prod(assign[j][di] for j in range(k, len(slots))) for di, d in enumerate(DIMS)}
        cache = live.get(lvl.name, 0)
        for b in lvl.buffers:
            if b.size is None:
                continue
            used = sum(box_elements(w, t, ext) * eb for t in sorted(b.usage)
                       if (lvl.name, t) not in bypass)
            if "inputs" in b.usage:
                used += cache
            if used > b.size:
                return False
        return True

    return check


def _utilizations(sk: Skeleton) -> tuple[float, float]:
    hw, w = sk.hw, sk.workload
    spatial = prod(prod(f) for s, f in zip(sk.slots, sk.factors) if s.spatial)
    idx = inner_memory_index(hw)
    lvl = hw.levels[idx]
    if lvl.size is None:
        return spatial / hw.pe_count, 1.0
    k0 = next(k for k, s in enumerate(sk.slots) if s.level_index == idx)
    ext = {d: prod(sk.factors[j][di] for j in range(k0, len(sk.slots))) for di, d in enumerate(DIMS)}
    used = sum(box_elements(w, t, ext) * hw.element_bytes for t in TENSORS
               if (lvl.name, t) not in sk.bypass)
    return spatial / hw.pe_count, used / lvl.size


def _prune_reason(pe_util: float, mem_util: float, c: MappingConstraints,
                  goal: DesignGoal | None) -> bool:
    if goal is DesignGoal.MAX_THROUGHPUT:
        return pe_util < c.pe_utilization_min
    if goal is DesignGoal.MIN_ENERGY:
        return mem_util < c.inner_memory_utilization_min
    return False


@dataclass
class MapSpace:
    workload: IntraLayerWorkload
    hw: HardwareDescription
    mappings: list[Mapping] = field(default_factory=list)
    constructed: int = 0
    invalid: int = 0
    pruned: int = 0

    @property
    def valid(self) -> int:
        return len(self.mappings)


@dataclass
class SkeletonStats:
    constructed: int = 0
    valid: int = 0
    pruned: int = 0

    @property
    def invalid(self) -> int:
        return self.constructed - self.valid - self.pruned


def iter_skeletons(w: IntraLayerWorkload, hw: HardwareDescription, c: MappingConstraints,
                   goal: DesignGoal | None = None, live_cache_bytes: dict | None = None,
                   stats: SkeletonStats | None = None) -> Iterator[Skeleton]:
    """Valid, unpruned skeletons in construction order. ``stats`` receives
    mapping-level counters (orders included)."""
    slots = mapping_slots(hw)
    if stats is not None:
        stats.constructed += count_mappings(w, hw, c)
    for bi, bypass in enumerate(bypass_combinations(hw, c)):
        check = _validity_check(w, hw, slots, bypass, live_cache_bytes)
        for facs in _factor_assignments(w, hw, c, slots, check):
            sk = Skeleton(w, hw, slots, facs, bypass, (bi, _dfs_key(facs)), c.pins)
            n_orders = sk.order_count()
            if n_orders == 0:
                continue
            if goal is not None and _prune_reason(*_utilizations(sk), c, goal):
                if stats is not None:
                    stats.pruned += n_orders
                continue
            if stats is not None:
                stats.valid += n_orders
            yield sk


def build_mapspace(w: IntraLayerWorkload, hw: HardwareDescription,
                   c: MappingConstraints | None = None, goal: DesignGoal | None = None,
                   live_cache_bytes: dict | None = None) -> MapSpace:
    """Materialize the valid (and, with ``goal``, pruned) mapspace."""
    c = c or MappingConstraints()
    stats = SkeletonStats()
    maps = [m for sk in iter_skeletons(w, hw, c, goal, live_cache_bytes, stats)
            for m in sk.mappings()]
    return MapSpace(w, hw, maps, stats.constructed, stats.invalid, stats.pruned)


def valid_mapspace_bruteforce(w: IntraLayerWorkload, hw: HardwareDescription,
                              c: MappingConstraints | None = None,
                              live_cache_bytes: dict | None = None) -> MapSpace:
    """Reference path: construct everything, then validate one by one."""
    space = MapSpace(w, hw)
    for m in construct_mappings(w, hw, c):
        space.constructed += 1
        if validate_mapping(m, hw, live_cache_bytes) is None:
            space.mappings.append(m)
        else:
            space.invalid += 1
    return space


def prune(space: MapSpace, c: MappingConstraints, goal: DesignGoal) -> MapSpace:
    """Drop mappings below the goal's utilization threshold (ties kept)."""
    from .mapping import inner_memory_utilization, pe_utilization

    keep = []
    for m in space.mappings:
        if not _prune_reason(pe_utilization(m, space.hw), inner_memory_utilization(m, space.hw),
                             c, goal):
            keep.append(m)
    return MapSpace(space.workload, space.hw, keep, space.constructed, space.invalid,
                    space.pruned + len(space.mappings) - len(keep))
