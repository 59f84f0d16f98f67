"""Exact branch-and-bound over the factor tree of a mapspace.

Slots are assigned from the outermost level inward; the innermost temporal
slot takes whatever is left of each bound. Once every slot above a storage
level is fixed, the tile that level holds is known. At that point its
capacity can be checked, and the traffic across the boundary above it can be
bounded from below. Every refetch term depends on the order of its own
level only, and energy is affine in each boundary's traffic, so the bound
picks for each enclosing level the single order that minimizes the summed
energy of all boundaries that level drives. Boundaries still open contribute the
compulsory traffic every element must cause. A subtree is cut when its bound
on (objective, energy, outermost accesses) is strictly worse than the best
mapping found so far, so the result equals the exhaustive argmin, tie-breaks
included.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import prod

from .arch import HardwareDescription, LevelKind
from .costs import CostTable
from .evaluator import (ActivityCounts, BoundaryCounts, _LoopInfo, _axis_extents, _coefficients,
                        _groups, _union_size, apply_zero_skip, counts_from_fill)
from .goals import DesignGoal
from .mapper import (MappingConstraints, Skeleton, _dfs_key, _divisors, _fixed_factors,
                     _prune_reason, _utilizations, bypass_combinations, mapping_slots)
from .mapping import box_elements, tensor_axes
from .workload import DIMS, TENSORS, IntraLayerWorkload


@lru_cache(maxsize=1 << 16)
def _level_min(loops: tuple, axes: tuple, tile: tuple, base: tuple) -> int:
    """Smallest refetch sum of one level's loops over all their orders.

    ``loops`` are (dim, bound, step); ``base`` is the displacement (per dim)
    caused by the loops of the levels inside. The term of a loop depends only
    on which loops of the level sit outside it, so a DP over subsets is exact.
    """
    m = len(loops)
    size = prod(tile)
    base_d = dict(base)
    best: list = [None] * (1 << m)
    best[0] = 0
    for outer_set in range(1 << m):
        f = best[outer_set]
        if f is None:
            continue
        outer = prod(loops[i][1] for i in range(m) if outer_set >> i & 1)
        for j in range(m):
            if outer_set >> j & 1:
                continue
            dim, b, step = loops[j]
            disp = dict(base_d)
            disp[dim] = disp.get(dim, 0) + step
            for i in range(m):
                if i != j and not outer_set >> i & 1:
                    d2, b2, s2 = loops[i]
                    disp[d2] = disp.get(d2, 0) - (b2 - 1) * s2
            overlap = 1
            for ax, e in zip(axes, tile):
                overlap *= max(0, e - abs(sum(c * disp.get(d, 0) for d, c in ax)))
                if not overlap:
                    break
            v = f + (b - 1) * outer * (size - overlap)
            nxt = outer_set | 1 << j
            if best[nxt] is None or v < best[nxt]:
                best[nxt] = v
    return best[-1]


def _displacements(levels: list[tuple]) -> list[tuple]:
    """Per level (outermost first), the displacement caused by the levels inside."""
    suffix: dict[str, int] = {}
    out = []
    for loops in reversed(levels):
        out.append(tuple(sorted(suffix.items())))
        for dim, b, step in loops:
            suffix[dim] = suffix.get(dim, 0) - (b - 1) * step
    out.reverse()
    return out


def min_fill(levels: list[tuple], axes: tuple, tile: tuple) -> int:
    """Lower bound on the fill count over all loop orders; ``levels`` lists
    the temporal levels above the child, outermost first."""
    total = prod(tile)
    outer = 1
    for loops, base in zip(levels, _displacements(levels)):
        if loops:
            total += outer * _level_min(loops, axes, tile, base)
            outer *= prod(b for _, b, _ in loops)
    return total


@lru_cache(maxsize=1 << 16)
def _joint_min(loops: tuple, terms: tuple) -> Fraction:
    """Smallest weighted refetch sum of one level's loops over their orders,
    with one order shared by every boundary in ``terms``: (weight, axes,
    tile, base) per boundary whose traffic the level drives."""
    m = len(loops)
    best: list = [None] * (1 << m)
    best[0] = 0
    den = math.lcm(*(Fraction(t[0]).denominator for t in terms))
    prepared = [(int(wt * den), axes, tile, prod(tile), dict(base))
                for wt, axes, tile, base in terms]
    for outer_set in range(1 << m):
        f = best[outer_set]
        if f is None:
            continue
        outer = prod(loops[i][1] for i in range(m) if outer_set >> i & 1)
        for j in range(m):
            if outer_set >> j & 1:
                continue
            dim, b, step = loops[j]
            v = f
            for wt, axes, tile, size, base_d in prepared:
                disp = dict(base_d)
                disp[dim] = disp.get(dim, 0) + step
                for i in range(m):
                    if i != j and not outer_set >> i & 1:
                        d2, b2, s2 = loops[i]
                        disp[d2] = disp.get(d2, 0) - (b2 - 1) * s2
                overlap = 1
                for ax, e in zip(axes, tile):
                    overlap *= max(0, e - abs(sum(c * disp.get(d, 0) for d, c in ax)))
                    if not overlap:
                        break
                v += wt * (b - 1) * outer * (size - overlap)
            nxt = outer_set | 1 << j
            if best[nxt] is None or v < best[nxt]:
                best[nxt] = v
    return Fraction(best[-1], den)


@dataclass(frozen=True)
class _Part:
    """A boundary whose enclosing slots are all fixed."""

    counts: BoundaryCounts  # at the per-tensor minimum fill
    tile: tuple
    energy0: Fraction  # energy with zero fill
    slope: Fraction  # energy per unit of fill
    levels: tuple  # (slot, loops, base displacement) per temporal slot above the child


@dataclass
class BoundStats:
    skeletons: int = 0
    evaluated: int = 0
    pruned: int = 0
    cut_capacity: int = 0
    cut_bound: int = 0


class _Tree:
    """Static data of one (workload, hardware, bypass choice) search."""

    def __init__(self, w: IntraLayerWorkload, hw: HardwareDescription, c: MappingConstraints,
                 cost: CostTable, goal: DesignGoal, bypass: frozenset, zero_skip: bool,
                 live: dict | None):
        self.w, self.hw, self.c, self.cost, self.goal = w, hw, c, cost, goal
        self.bypass, self.zero_skip, self.live = bypass, zero_skip, live or {}
        self.slots = mapping_slots(hw)
        n = len(self.slots)
        self.rem_slot = max(k for k, s in enumerate(self.slots) if not s.spatial)
        self.plan = [k for k in range(n) if k != self.rem_slot] + [self.rem_slot]
        pos = {k: p for p, k in enumerate(self.plan)}
        self.fixed = _fixed_factors(c, self.slots)
        self.allowed = [c.allowed(d) for d in DIMS]
        self.axes = {t: tuple(tuple(sorted(ax.items())) for ax in tensor_axes(w, t))
                     for t in TENSORS}
        self.axes_d = {t: tensor_axes(w, t) for t in TENSORS}
        self.relevant = {t: {d for ax in self.axes_d[t] for d, cf in ax.items() if cf}
                         for t in TENSORS}

        def ready(level: int) -> int:
            """Plan position after which every slot above ``level`` is fixed."""
            return max((pos[k] for k, s in enumerate(self.slots) if s.level_index > level),
                       default=-1)

        self.boundaries = []  # (ready position, tensor, parent, child)
        for t in TENSORS:
            chain = [i for i in reversed(hw.memory_indices)
                     if (hw.levels[i].name, t) not in bypass] + [0]
            for p, k in zip(chain, chain[1:]):
                self.boundaries.append((ready(k), t, p, k))
        self.capacity = []  # (ready position, level index)
        for i in hw.memory_indices:
            if any(b.size is not None for b in hw.levels[i].buffers):
                self.capacity.append((ready(i), i))
        self.instances_ready = {i: max((pos[k] for k, s in enumerate(self.slots)
                                        if s.spatial and s.level_index > i), default=-1)
                                for i in range(len(hw.levels))}
        self.touched = {}
        unit = [_LoopInfo(0, d, b, False, 1) for d, b in zip(DIMS, w.bounds) if b > 1]
        for t in TENSORS:
            self.touched[t] = _union_size(unit, self.axes_d[t], [1] * len(self.axes_d[t]))
        self.co = _coefficients(hw, cost)
        self.zf = dict(w.zero_fraction)
        self.names = tuple(lvl.name for lvl in hw.levels)
        self.temporal = [k for k, s in enumerate(self.slots) if not s.spatial]
        self.memo: dict = {}
        self.keep = {}
        if zero_skip:
            for t in ("inputs", "filters"):
                k = 1.0 - self.zf.get(t, 0.0)
                if k < 1.0:
                    self.keep[t] = Fraction(k)
        self.floors = {(t, par, ch): self.floor(t, par, ch) for _, t, par, ch in self.boundaries}
        self.floor_energy = {key: self._energy(bc) for key, bc in self.floors.items()}
        macs = ActivityCounts(w.macs, (), self.names)
        if zero_skip:
            macs = apply_zero_skip(macs, self.zf, hw.skip_index)
        self.mac_energy = macs.macs * self.co.mac_pj

    # -- helpers over a partial assignment -------------------------------

    def _tile(self, assign, level: int) -> dict[str, int]:
        ext = {}
        for di, d in enumerate(DIMS):
            div = 1
            for k, s in enumerate(self.slots):
                if s.level_index > level:
                    div *= assign[k][di]
            ext[d] = self.w.bounds[di] // div
        return ext

    def capacity_ok(self, assign, level: int) -> bool:
        hw, w = self.hw, self.w
        lvl = hw.levels[level]
        ext = self._tile(assign, level)
        cache = self.live.get(lvl.name, 0)
        for b in lvl.buffers:
            if b.size is None:
                continue
            used = sum(box_elements(w, t, ext) * hw.element_bytes for t in sorted(b.usage)
                       if (lvl.name, t) not in self.bypass)
            if "inputs" in b.usage:
                used += cache
            if used > b.size:
                return False
        return True

    def _energy(self, bc: BoundaryCounts) -> Fraction:
        """Dynamic energy of one boundary's traffic, as the evaluator charges it."""
        co, names = self.co, self.names
        pr, pw = co.access_pj[(names[bc.parent], bc.tensor)]
        e = bc.parent_reads * pr + bc.parent_writes * pw
        if bc.child > 0:
            cr, cw = co.access_pj[(names[bc.child], bc.tensor)]
            e += bc.child_reads * cr + bc.child_writes * cw
        if bc.routing is not None:
            hop, acc = co.hop_pj[names[bc.routing]]
            weighted = bc.unicast + sum(n * (1 + co.alpha * (f - 1)) for f, n in bc.multicast)
            e += weighted * hop + bc.accumulate * acc
        keep = self.keep.get(bc.tensor)
        if keep is not None and bc.parent <= self.hw.skip_index:
            e *= keep
        return e

    def boundary(self, assign, tensor: str, parent: int, child: int) -> _Part:
        above = tuple(k for k, s in enumerate(self.slots) if s.level_index > child)
        key = (tensor, parent, child, tuple(assign[k] for k in above))
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        bounds = self.w.bounds
        done = [1] * 7
        levels, slots, nodes, inst, seq_relevant = [], [], [], 1, 1
        for k in above:
            s = self.slots[k]
            loops = []
            for di, d in enumerate(DIMS):
                f = assign[k][di]
                done[di] *= f
                if f > 1:
                    loops.append((d, f, bounds[di] // done[di]))
            if s.spatial:
                if s.level_index > parent:
                    inst *= prod(f for _, f, _ in loops)
                elif s.level_index > child:
                    nodes.extend(_LoopInfo(s.level_index, d, f, True, st) for d, f, st in loops)
                continue
            levels.append(tuple(sorted(loops)))
            slots.append(k)
            seq_relevant *= prod(f for d, f, _ in loops if d in self.relevant[tensor])
        ext = {d: bounds[di] // done[di] for di, d in enumerate(DIMS)}
        tile = tuple(_axis_extents(self.axes_d[tensor], ext))
        fill = min_fill(levels, self.axes[tensor], tile)
        sizes = _groups(nodes, self.axes_d[tensor])
        routing = [i for i in range(child + 1, parent)
                   if self.hw.levels[i].kind is LevelKind.ROUTING]
        r_idx = routing[-1] if routing else None
        distinct = prod(tile) * seq_relevant

        def at(f):
            return counts_from_fill(tensor, parent, child, r_idx, f, sizes, inst, distinct)

        e0 = self._energy(at(0))
        out = _Part(at(fill), tile, e0, self._energy(at(1)) - e0,
                    tuple(zip(slots, levels, _displacements(levels))))
        self.memo[key] = out
        return out

    def floor(self, tensor: str, parent: int, child: int) -> BoundaryCounts:
        n = self.touched[tensor]
        if tensor == "outputs":
            return BoundaryCounts(tensor, parent, child, None, parent_writes=n, child_reads=n)
        return BoundaryCounts(tensor, parent, child, None, parent_reads=n, child_writes=n)

    def bound(self, assign, p: int, best=None) -> tuple:
        """(objective, energy pJ, outermost accesses) no completion can beat.

        The energy term is exact over loop orders once every boundary is
        determined: each level picks one order for all the traffic it drives.
        With ``best`` (the incumbent rank) given, terms that cannot change
        the comparison against it may be left at zero.
        """
        bcs, energy = [], self.mac_energy
        per_slot: dict[int, list] = {}
        for ready, t, par, ch in self.boundaries:
            if ready > p:
                bc = self.floors[(t, par, ch)]
                bcs.append(bc)
                energy += self.floor_energy[(t, par, ch)]
                continue
            part = self.boundary(assign, t, par, ch)
            bcs.append(part.counts)
            energy += part.energy0 + part.slope * prod(part.tile)
            if part.slope:
                for k, loops, base in part.levels:
                    if loops:
                        per_slot.setdefault(k, []).append(
                            (part.slope, self.axes[t], part.tile, base))
        outer = 1
        for k in self.temporal:
            loops = tuple(sorted((d, f, self.w.bounds[di] // self._done(assign, k)[di])
                                 for di, (d, f) in enumerate(zip(DIMS, assign[k])) if f > 1)) \
                if assign[k] is not None else ()
            if k in per_slot and loops:
                energy += outer * _joint_min(loops, tuple(per_slot[k]))
            if assign[k] is not None:
                outer *= prod(assign[k])
        if self.goal is DesignGoal.MIN_ENERGY and (best is None or energy != best[1]):
            return (energy, energy, 0)
        counts = ActivityCounts(self.w.macs, tuple(bcs), self.names)
        if self.zero_skip:
            counts = apply_zero_skip(counts, self.zf, self.hw.skip_index)
        dram = Fraction(counts.outermost_accesses())
        if self.goal is DesignGoal.MIN_ENERGY:
            return (energy, energy, dram)
        cycles = self.cycles(assign, p, counts)
        obj = Fraction(cycles) if self.goal is DesignGoal.MAX_THROUGHPUT else energy * cycles
        return (obj, energy, dram)

    def _done(self, assign, k: int) -> list[int]:
        done = [1] * 7
        for kk in range(k + 1):
            for di, f in enumerate(assign[kk]):
                done[di] *= f
        return done

    def cycles(self, assign, p: int, counts: ActivityCounts) -> int:
        hw, co = self.hw, self.co
        active = 1
        for pp, k in enumerate(self.plan):
            s = self.slots[k]
            if not s.spatial:
                continue
            if pp <= p:
                active *= prod(assign[k])
            else:
                size = hw.levels[s.level_index].routing_size
                active *= size[0] if s.axis == "x" else size[1]
        active = min(active, hw.pe_count)
        best = math.ceil(Fraction(counts.macs) / (active * co.stages))
        for i, lvl in enumerate(hw.levels):
            if lvl.kind is LevelKind.MEMORY:
                if self.instances_ready[i] > p:
                    continue
                inst = prod(prod(assign[k]) for k, s in enumerate(self.slots)
                            if s.spatial and s.level_index > i)
                for tensors, rbw, wbw in co.buffers[lvl.name]:
                    r, w = counts.level_reads_writes(lvl.name, tensors)
                    best = max(best, math.ceil(max(r / rbw, w / wbw) / inst))
            elif lvl.kind is LevelKind.ROUTING:
                best = max(best, math.ceil(counts.routing_events(lvl.name) / co.routing_bw[lvl.name]))
        return best

    def options(self, assign, p: int, rem: list[int]):
        k = self.plan[p]
        s = self.slots[k]
        per_dim = []
        for di, d in enumerate(DIMS):
            f = self.fixed.get((d, k))
            if p == len(self.plan) - 1:
                cand = (rem[di],) if f is None or f == rem[di] else ()
            elif f is not None:
                cand = (f,) if rem[di] % f == 0 else ()
            else:
                cand = _divisors(rem[di])
            if self.allowed[di] is not None:
                cand = tuple(x for x in cand if x in self.allowed[di])
            if s.spatial:
                size = self.hw.levels[s.level_index].routing_size
                cap = size[0] if s.axis == "x" else size[1]
                cand = tuple(x for x in cand if x <= cap)
            per_dim.append(cand)
        if not s.spatial:
            return itertools.product(*per_dim)
        size = self.hw.levels[s.level_index].routing_size
        cap = min(size[0] if s.axis == "x" else size[1], self.hw.pe_count)
        return (f for f in itertools.product(*per_dim) if prod(f) <= cap)

    def spatial_ok(self, assign, p: int) -> bool:
        total = 1
        for pp in range(p + 1):
            s = self.slots[self.plan[pp]]
            if s.spatial:
                total *= prod(assign[self.plan[pp]])
        return total <= self.hw.pe_count


def branch_and_bound(w: IntraLayerWorkload, hw: HardwareDescription, goal: DesignGoal,
                     c: MappingConstraints, cost: CostTable, search_skeleton, *,
                     prune: bool = True, zero_skip: bool = False,
                     live_cache_bytes: dict | None = None, stats: BoundStats | None = None):
    """Best (rank, mapping, result) of the mapspace, or None when it is empty.

    ``search_skeleton(sk)`` returns the best (rank, mapping, result) over the
    loop orders of one skeleton and the number of evaluations it spent.
    """
    stats = stats if stats is not None else BoundStats()
    best = None

    for bi, bypass in enumerate(bypass_combinations(hw, c)):
        tree = _Tree(w, hw, c, cost, goal, bypass, zero_skip, live_cache_bytes)
        n = len(tree.plan)
        assign: list = [None] * len(tree.slots)
        if not all(tree.capacity_ok(assign, lv) for r, lv in tree.capacity if r < 0):
            stats.cut_capacity += 1
            continue

        def visit(p: int, rem: list[int]):
            k = tree.plan[p]
            children = []
            for facs in tree.options(assign, p, rem):
                assign[k] = facs
                if tree.slots[k].spatial and not tree.spatial_ok(assign, p):
                    continue
                if not all(tree.capacity_ok(assign, lv) for r, lv in tree.capacity if r == p):
                    stats.cut_capacity += 1
                    continue
                if p == n - 1:
                    children.append((None, facs))
                    continue
                children.append((tree.bound(assign, p, best and best[0]), facs))
            if p < n - 1:
                children.sort()
            for lb, facs in children:
                assign[k] = facs
                if lb is not None and best is not None and lb > best[0][:3]:
                    stats.cut_bound += 1
                    continue
                if p < n - 1:
                    visit(p + 1, [r // f for r, f in zip(rem, facs)])
                    continue
                leaf(tuple(assign))
            assign[k] = None

        def leaf(facs: tuple):
            nonlocal best
            sk = Skeleton(w, hw, tree.slots, facs, bypass, (bi, _dfs_key(facs)), c.pins)
            n_orders = sk.order_count()
            if n_orders == 0:
                return
            if prune and _prune_reason(*_utilizations(sk), c, goal):
                stats.pruned += n_orders
                return
            stats.skeletons += 1
            lb = tree.bound(list(facs), n - 1, best and best[0])
            if best is not None and lb + (sk.key,) > best[0]:
                stats.cut_bound += 1
                return
            found, spent = search_skeleton(sk)
            stats.evaluated += spent
            if found is not None and (best is None or found[0] < best[0]):
                best = found

        visit(0, list(w.bounds))
    return best
