"""Analytic activity counts, cycles, energy and area.

Traffic is counted per boundary of a tensor's storage chain. The chain of a
tensor is the list of memory levels that hold it (bypassed levels dropped),
closed by the compute level. Across the boundary from parent P to child K,
every child instance holds a box-shaped tile spanned by the loops at K and
inside it. The temporal loops above K move that tile; whenever loop j steps,
the new tile is displaced from the old one and only the non-overlapping part
is transferred:

    fills = |T| + sum_j (b_j - 1) * prod(outer bounds) * (|T| - overlap_j)

Child instances under the spatial loops between K and P whose tiles are the
same box form a sharing group: inputs and filters are multicast to a group,
outputs from a group are reduced on the way up.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property, lru_cache
from math import prod
from typing import Iterable

from .arch import HardwareDescription, LevelKind
from .costs import CostTable
from .mapping import Mapping, SubKind, level_subs, tensor_axes
from .workload import TENSORS, ActivationCacheEntry, PreprocessOp

PJ = 1e-12


@dataclass(frozen=True)
class BoundaryCounts:
    """Traffic of one tensor across one parent/child boundary (all instances)."""

    tensor: str
    parent: int
    child: int
    routing: int | None
    parent_reads: float = 0
    parent_writes: float = 0
    child_reads: float = 0
    child_writes: float = 0
    unicast: float = 0
    multicast: tuple[tuple[int, float], ...] = ()  # (fanout, events)
    accumulate: float = 0

    def scaled(self, k: float) -> "BoundaryCounts":
        k = Fraction(k)  # exact, so scaled counts stay additive
        return replace(self, parent_reads=self.parent_reads * k, parent_writes=self.parent_writes * k,
                       child_reads=self.child_reads * k, child_writes=self.child_writes * k,
                       unicast=self.unicast * k, accumulate=self.accumulate * k,
                       multicast=tuple((f, c * k) for f, c in self.multicast))


@dataclass(frozen=True)
class ActivityCounts:
    macs: float
    boundaries: tuple[BoundaryCounts, ...]
    levels: tuple[str, ...]
    preprocess: tuple[tuple[str, int], ...] = ()

    def accesses(self) -> dict[tuple[str, str], tuple[float, float]]:
        """(reads, writes) per (memory level, tensor)."""
        return dict(self._accesses)

    @cached_property
    def _accesses(self) -> dict:
        acc: dict[tuple[str, str], list] = {}
        for b in self.boundaries:
            p = acc.setdefault((self.levels[b.parent], b.tensor), [0, 0])
            p[0] += b.parent_reads
            p[1] += b.parent_writes
            if b.child > 0:
                c = acc.setdefault((self.levels[b.child], b.tensor), [0, 0])
                c[0] += b.child_reads
                c[1] += b.child_writes
        return {k: (v[0], v[1]) for k, v in sorted(acc.items())}

    def noc(self) -> dict[tuple[str, str], dict]:
        """Per (routing level, tensor): unicast, multicast {fanout: events}, accumulate."""
        return {k: dict(v, multicast=dict(v["multicast"])) for k, v in self._noc.items()}

    @cached_property
    def _noc(self) -> dict:
        out: dict[tuple[str, str], dict] = {}
        for b in self.boundaries:
            if b.routing is None:
                continue
            d = out.setdefault((self.levels[b.routing], b.tensor),
                               {"unicast": 0, "multicast": {}, "accumulate": 0})
            d["unicast"] += b.unicast
            d["accumulate"] += b.accumulate
            for f, c in b.multicast:
                d["multicast"][f] = d["multicast"].get(f, 0) + c
        return dict(sorted(out.items()))

    def level_reads_writes(self, level: str, tensors: Iterable[str]) -> tuple[float, float]:
        acc = self._accesses
        r = sum(acc.get((level, t), (0, 0))[0] for t in tensors)
        w = sum(acc.get((level, t), (0, 0))[1] for t in tensors)
        return r, w

    def routing_events(self, level: str) -> float:
        total = 0
        for (lv, _), d in self._noc.items():
            if lv == level:
                total += d["unicast"] + d["accumulate"] + sum(d["multicast"].values())
        return total

    def outermost_accesses(self) -> float:
        top = self.levels[-1]
        return sum(r + w for (lv, _), (r, w) in self._accesses.items() if lv == top)


@dataclass(frozen=True)
class _LoopInfo:
    level: int
    dim: str
    bound: int
    spatial: bool
    step: int


def _loop_table(m: Mapping, hw: HardwareDescription) -> list[_LoopInfo]:
    """All loops outer to inner, each with its index step within its dim."""
    subs = level_subs(m, hw)
    flat = []
    for i in reversed(range(len(subs))):
        for l in subs[i].loops:
            flat.append((i, l.dim, l.bound, subs[i].kind is SubKind.SPATIAL))
    out = []
    inner: dict[str, int] = {}
    for i, dim, b, sp in reversed(flat):
        out.append(_LoopInfo(i, dim, b, sp, inner.get(dim, 1)))
        inner[dim] = inner.get(dim, 1) * b
    out.reverse()
    return out


def storage_chain(m: Mapping, hw: HardwareDescription, tensor: str) -> list[int]:
    """Level indices holding ``tensor``, outermost first, ending with compute (0)."""
    mems = [i for i in reversed(hw.memory_indices)
            if (hw.levels[i].name, tensor) not in m.bypass]
    return mems + [0]


def _axis_extents(axes, ext: dict[str, int]) -> list[int]:
    return [1 + sum(c * (ext.get(d, 1) - 1) for d, c in ax.items()) for ax in axes]


def _fills(seq: list[_LoopInfo], axes, tile_ext: list[int]) -> int:
    size = prod(tile_ext)
    total = size
    outer = 1
    for j, lj in enumerate(seq):
        if lj.bound > 1:
            disp = {lj.dim: lj.step}
            for li in seq[j + 1:]:
                disp[li.dim] = disp.get(li.dim, 0) - (li.bound - 1) * li.step
            overlap = 1
            for ax, e in zip(axes, tile_ext):
                shift = abs(sum(c * disp.get(d, 0) for d, c in ax.items()))
                overlap *= max(0, e - shift)
                if overlap == 0:
                    break
            total += (lj.bound - 1) * outer * (size - overlap)
        outer *= lj.bound
    return total


def _union_size(seq: list[_LoopInfo], axes, tile_ext: list[int]) -> int:
    """Distinct elements covered by every tile position of the sequence.

    Axes use disjoint dims, so the union is a product of per-axis unions of
    equal-length intervals."""
    total = 1
    for ax, e in zip(axes, tile_ext):
        offsets = {0}
        for l in seq:
            c = ax.get(l.dim, 0)
            if c and l.bound > 1:
                offsets = {o + c * l.step * i for o in offsets for i in range(l.bound)}
        covered, end = 0, None
        for o in sorted(offsets):
            start = o if end is None else max(o, end)
            covered += max(0, o + e - start)
            end = o + e if end is None else max(end, o + e)
        total *= covered
    return total


def _groups(nodes: list[_LoopInfo], axes) -> tuple[int, ...]:
    """Sizes of the sets of nodes whose tiles coincide."""
    if not nodes:
        return (1,)
    return _groups_cached(tuple(nodes), tuple(tuple(sorted(ax.items())) for ax in axes))


@lru_cache(maxsize=4096)
def _groups_cached(nodes: tuple, axes: tuple) -> tuple[int, ...]:
    axes = [dict(ax) for ax in axes]
    counter: Counter = Counter()
    for idx in itertools.product(*(range(n.bound) for n in nodes)):
        off: dict[str, int] = {}
        for n, i in zip(nodes, idx):
            off[n.dim] = off.get(n.dim, 0) + i * n.step
        counter[tuple(sum(c * off.get(d, 0) for d, c in ax.items()) for ax in axes)] += 1
    return tuple(sorted(counter.values()))


def boundary_counts(m: Mapping, hw: HardwareDescription, tensor: str, parent: int, child: int,
                    loops: list[_LoopInfo] | None = None, optimistic: bool = False) -> BoundaryCounts:
    """Traffic across one boundary. ``optimistic`` assumes perfect reuse (each
    distinct element enters a child once), a lower bound over loop orders."""
    loops = _loop_table(m, hw) if loops is None else loops
    w = m.workload
    axes = tensor_axes(w, tensor)
    relevant = {d for ax in axes for d, c in ax.items() if c}
    seq = [l for l in loops if l.level > child and not l.spatial]
    nodes = [l for l in loops if l.spatial and child < l.level < parent]
    inst = prod(l.bound for l in loops if l.spatial and l.level > parent)
    ext: dict[str, int] = {}
    for l in loops:
        if l.level <= child:
            ext[l.dim] = ext.get(l.dim, 1) * l.bound
    tile = _axis_extents(axes, ext)
    if optimistic:
        fill = _union_size(seq, axes, tile)
    else:
        fill = _fills(seq, axes, tile)
    sizes = _groups(nodes, axes)
    routing = [i for i in range(child + 1, parent) if hw.levels[i].kind is LevelKind.ROUTING]
    r_idx = routing[-1] if routing else None
    distinct = prod(tile) * prod(l.bound for l in seq if l.dim in relevant)
    return counts_from_fill(tensor, parent, child, r_idx, fill, sizes, inst, distinct)


def counts_from_fill(tensor: str, parent: int, child: int, r_idx: int | None, fill,
                     sizes: tuple[int, ...], inst: int, distinct: int) -> BoundaryCounts:
    """Boundary traffic given the per-node fill count.

    ``sizes`` are the sharing-group sizes of the child nodes, ``inst`` the
    parent instances, ``distinct`` the output elements one node produces."""
    n_nodes, n_groups = sum(sizes), len(sizes)
    singles = sum(1 for s in sizes if s == 1)
    if tensor != "outputs":
        multicast = Counter()
        for s in sizes:
            if s > 1:
                multicast[s] += fill * inst
        return BoundaryCounts(
            tensor, parent, child, r_idx,
            parent_reads=fill * n_groups * inst,
            child_writes=fill * n_nodes * inst,
            unicast=fill * singles * inst if r_idx is not None else 0,
            multicast=tuple(sorted(multicast.items())) if r_idx is not None else ())
    rb, wb = fill - distinct, fill
    shared = sum(s for s in sizes if s > 1)
    return BoundaryCounts(
        tensor, parent, child, r_idx,
        parent_reads=rb * n_groups * inst,
        parent_writes=wb * n_groups * inst,
        child_reads=wb * n_nodes * inst,
        child_writes=rb * n_groups * inst,
        unicast=(rb * n_groups + wb * singles) * inst if r_idx is not None else 0,
        accumulate=wb * shared * inst if r_idx is not None else 0)


def count_macs(m: Mapping) -> int:
    """Product of every loop bound in every sub-mapping."""
    return prod(l.bound for s in m.subs for l in s.loops)


def count_activity(m: Mapping, hw: HardwareDescription, optimistic: bool = False) -> ActivityCounts:
    """All analytic counts of a mapping; see :func:`boundary_counts` for ``optimistic``."""
    loops = _loop_table(m, hw)
    bounds = []
    for t in TENSORS:
        chain = storage_chain(m, hw, t)
        for p, k in zip(chain, chain[1:]):
            bounds.append(boundary_counts(m, hw, t, p, k, loops, optimistic))
    return ActivityCounts(count_macs(m), tuple(bounds), tuple(l.name for l in hw.levels))


def count_memory_accesses(m: Mapping, hw: HardwareDescription, level: str,
                          tensor: str) -> tuple[float, float]:
    return count_activity(m, hw).accesses().get((level, tensor), (0, 0))


def classify_noc_activities(m: Mapping, hw: HardwareDescription) -> dict:
    return count_activity(m, hw).noc()


def apply_zero_skip(counts: ActivityCounts, zero_fraction: dict[str, float],
                    skip_index: int) -> ActivityCounts:
    """Scale MACs, and operand traffic at or inward of ``skip_index``, by the
    fraction of structurally non-zero operands."""
    keep = {t: 1.0 - zero_fraction.get(t, 0.0) for t in ("inputs", "filters")}
    bounds = tuple(b.scaled(keep[b.tensor]) if b.tensor in keep and b.parent <= skip_index
                   and keep[b.tensor] < 1.0 else b for b in counts.boundaries)
    macs = counts.macs * Fraction(keep["inputs"]) * Fraction(keep["filters"])
    if macs == counts.macs and bounds == counts.boundaries:
        return counts
    return replace(counts, macs=macs, boundaries=bounds)


# --------------------------------------------------------------------------
# performance, energy, area


def _instances(m: Mapping | None, hw: HardwareDescription, level: int) -> int:
    """Active instances of a level (spatial bounds above it); physical when ``m`` is None."""
    n = 1
    for i in range(level + 1, len(hw.levels)):
        lvl = hw.levels[i]
        if lvl.kind is LevelKind.ROUTING:
            if m is None:
                n *= lvl.routing_size[0] * lvl.routing_size[1]
            else:
                n *= prod(l.bound for l in m.sub(lvl.name).loops)
    return n


@dataclass(frozen=True)
class _Coefficients:
    """Exact per-activity costs of one (hardware, cost table) pair."""

    mac_pj: Fraction
    stages: int
    access_pj: dict  # (level, tensor) -> (read pJ, write pJ)
    hop_pj: dict  # routing level -> (hop pJ, accumulate pJ)
    alpha: Fraction
    buffers: dict  # memory level -> [(tensors, read elems/cycle, write elems/cycle)]
    routing_bw: dict  # routing level -> elems/cycle


_COEFF_CACHE: dict = {}


def _coefficients(hw: HardwareDescription, cost: CostTable) -> _Coefficients:
    key = (hw, id(cost))
    hit = _COEFF_CACHE.get(key)
    if hit is not None and hit[0] is cost:
        return hit[1]
    F = Fraction
    access, hops, buffers, rbw = {}, {}, {}, {}
    for lvl in hw.levels:
        if lvl.kind is LevelKind.MEMORY:
            rows = []
            for b in lvl.buffers:
                c = cost.mem(b)
                for t in sorted(b.usage):
                    access[(lvl.name, t)] = (F(c.read_pj), F(c.write_pj))
                rows.append((tuple(sorted(b.usage)), F(c.read_bandwidth) * b.ports,
                             F(c.write_bandwidth) * b.ports))
            buffers[lvl.name] = rows
        elif lvl.kind is LevelKind.ROUTING:
            rc = cost.route(lvl)
            hops[lvl.name] = (F(rc.hop_pj), F(rc.accumulate_pj))
            rbw[lvl.name] = F(rc.bandwidth)
    co = _Coefficients(F(cost.pe.mac_pj), cost.pipeline_stages(hw), access, hops,
                       F(cost.multicast_alpha), buffers, rbw)
    if len(_COEFF_CACHE) > 256:
        _COEFF_CACHE.clear()
    _COEFF_CACHE[key] = (cost, co)
    return co


def level_cycles(m: Mapping, hw: HardwareDescription, counts: ActivityCounts,
                 cost: CostTable) -> dict[str, int]:
    """Cycles each level needs on its own; the workload takes the maximum."""
    co = _coefficients(hw, cost)
    out = {}
    active = m.spatial_product
    out[hw.compute.name] = math.ceil(Fraction(counts.macs) / (active * co.stages))
    for i, lvl in enumerate(hw.levels):
        if lvl.kind is LevelKind.MEMORY:
            inst = _instances(m, hw, i)
            worst = 0
            for tensors, rbw, wbw in co.buffers[lvl.name]:
                r, w = counts.level_reads_writes(lvl.name, tensors)
                need = max(r / rbw, w / wbw)
                worst = max(worst, math.ceil(need / inst))
            out[lvl.name] = worst
        elif lvl.kind is LevelKind.ROUTING:
            out[lvl.name] = math.ceil(counts.routing_events(lvl.name) / co.routing_bw[lvl.name])
    return out


def workload_cycles(m: Mapping, hw: HardwareDescription, counts: ActivityCounts,
                    cost: CostTable) -> int:
    return max(level_cycles(m, hw, counts, cost).values())


def preprocess_cycles(op: PreprocessOp, hw: HardwareDescription, cost: CostTable) -> int:
    if op.is_identity and cost.skip_identity_preprocess:
        return 0
    return math.ceil(op.out_elements / cost.preprocess_bandwidth(hw))


def preprocess_energy(op: PreprocessOp, hw: HardwareDescription, cost: CostTable) -> float:
    """One read and one write per produced element at the outermost memory."""
    if op.is_identity and cost.skip_identity_preprocess:
        return 0.0
    c = cost.mem(hw.levels[-1].buffers[0])
    return op.out_elements * (c.read_pj + c.write_pj) * PJ


def total_cycles(workload_cycle_counts: Iterable[int], preprocess_cycle_counts: Iterable[int],
                 extra: int = 0) -> int:
    """Workloads and preprocessing run back to back; caching overlaps with them."""
    return sum(workload_cycle_counts) + sum(preprocess_cycle_counts) + extra


def level_energy_pj(counts: ActivityCounts, hw: HardwareDescription,
                    cost: CostTable) -> dict[str, Fraction]:
    """Exact dynamic energy (pJ) per hardware level; MACs go to the compute level.

    Exact arithmetic keeps the total linear in the counts, so energies of
    mappings assembled from independently evaluated parts compare exactly.
    """
    co = _coefficients(hw, cost)
    out = {lvl.name: Fraction(0) for lvl in hw.levels}
    out[hw.compute.name] = counts.macs * co.mac_pj
    for (level, tensor), (r, w) in counts._accesses.items():
        cr, cw = co.access_pj[(level, tensor)]
        out[level] += r * cr + w * cw
    for (level, _), d in counts._noc.items():
        hop, acc = co.hop_pj[level]
        weighted = d["unicast"]
        for f, n in d["multicast"].items():
            weighted += n * (1 + co.alpha * (f - 1))
        out[level] += weighted * hop + d["accumulate"] * acc
    return out


def level_energy(counts: ActivityCounts, hw: HardwareDescription, cost: CostTable) -> dict[str, float]:
    """Dynamic energy (J) per hardware level; MACs are charged to the compute level."""
    return {k: float(v) * PJ for k, v in level_energy_pj(counts, hw, cost).items()}


def dynamic_energy(counts: ActivityCounts, hw: HardwareDescription, cost: CostTable) -> float:
    return sum(level_energy(counts, hw, cost).values())


def static_energy(cache: Iterable[ActivationCacheEntry], position_cycles: dict[int, int],
                  hw: HardwareDescription, cost: CostTable) -> float:
    """Leakage (J) of cached activations over their lifetime in the schedule."""
    buf = hw.levels[hw.cache_index].buffer_for("inputs")
    uw = cost.mem(buf).static_uw_per_byte
    total = 0.0
    for e in cache:
        cycles = sum(c for p, c in position_cycles.items() if e.created_at <= p <= e.freed_at)
        total += e.size_bytes(hw.precision_bits) * uw * 1e-6 * cycles / cost.clock_hz
    return total


def total_area(hw: HardwareDescription, cost: CostTable) -> float:
    """Area (um^2): PEs, bounded buffers and routing nodes, times physical copies."""
    if not hw.levels:
        raise ValueError("empty hardware description")
    area = hw.pe_count * cost.pe.area_um2
    for i, lvl in enumerate(hw.levels):
        copies = _instances(None, hw, i)
        if lvl.kind is LevelKind.MEMORY:
            for b in lvl.buffers:
                if b.size is not None:
                    area += b.size * cost.mem(b).area_um2_per_byte * copies
        elif lvl.kind is LevelKind.ROUTING:
            nodes = lvl.routing_size[0] * lvl.routing_size[1]
            area += nodes * copies * cost.route(lvl).area_um2_per_node
    return area


@dataclass
class EvalResult:
    cycles: int
    dynamic_energy: float
    static_energy: float = 0.0
    area: float = 0.0
    clock_hz: float = 1e9
    level_energy: dict[str, float] = field(default_factory=dict)
    phase_energy: dict[str, float] = field(default_factory=dict)
    level_cycles: dict[str, int] = field(default_factory=dict)
    pe_active: dict[str, int] = field(default_factory=dict)
    dram_accesses: float = 0.0
    macs: float = 0.0
    # exact dynamic energy (pJ) and outermost-memory accesses of one mapping,
    # used for ranking; left at zero on architecture totals
    energy_pj: Fraction = Fraction(0)
    dram_exact: Fraction = Fraction(0)

    @property
    def energy(self) -> float:
        return self.dynamic_energy + self.static_energy

    @property
    def seconds(self) -> float:
        return self.cycles / self.clock_hz

    @property
    def edp(self) -> float:
        return self.energy * self.seconds


def evaluate_counts(m: Mapping, hw: HardwareDescription, counts: ActivityCounts,
                    cost: CostTable) -> EvalResult:
    lc = level_cycles(m, hw, counts, cost)
    exact = level_energy_pj(counts, hw, cost)
    total = sum(exact.values())
    w = m.workload
    dram = Fraction(counts.outermost_accesses())
    return EvalResult(cycles=max(lc.values()), dynamic_energy=float(total) * PJ,
                      area=total_area(hw, cost), clock_hz=cost.clock_hz,
                      level_energy={k: float(v) * PJ for k, v in exact.items()},
                      phase_energy={w.phase.value: float(total) * PJ}, level_cycles=lc,
                      pe_active={w.name or str(w.sequence_position): m.spatial_product},
                      dram_accesses=float(dram), macs=float(counts.macs),
                      energy_pj=total, dram_exact=dram)


def evaluate_mapping(m: Mapping, hw: HardwareDescription, cost: CostTable,
                     zero_skip: bool = False, skip_index: int | None = None) -> EvalResult:
    """Cycles and dynamic energy of one mapped workload."""
    counts = count_activity(m, hw)
    if zero_skip:
        counts = apply_zero_skip(counts, dict(m.workload.zero_fraction),
                                 hw.skip_index if skip_index is None else skip_index)
    return evaluate_counts(m, hw, counts, cost)
