"""Mapping search per workload and the architecture sweep.

Activity counts are additively separable in the loop orders of the temporal
levels: every fill term belongs to one loop, and its value depends only on
the order inside that loop's level. The search therefore scores each level's
orders with the other levels held at their first order, keeps the orders no
alternative beats on every cost that matters to the goal, and assembles the
survivors. Assembled counts are exact integers, so the result equals an
exhaustive scan with the same tie-break.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable

from .arch import HardwareDescription, LevelKind, ParameterSweep, enumerate_architectures
from .costs import CostTable
from .evaluator import (ActivityCounts, EvalResult, apply_zero_skip,
                        count_activity, evaluate_counts, preprocess_cycles, preprocess_energy,
                        static_energy, total_area)
from .goals import DesignGoal
from .mapper import MappingConstraints, SkeletonStats, count_mappings, iter_skeletons
from .search import BoundStats, branch_and_bound
from .mapping import Mapping
from .workload import (IntraLayerWorkload, LayerKind, NetworkSpec, generate_inter_workloads,
                       generate_intra_workloads, live_cache_elements)


class NoValidMapping(RuntimeError):
    pass


def rank(goal: DesignGoal, r: EvalResult, key: tuple) -> tuple:
    """Sort key: objective, then energy, then outermost-memory accesses, then
    construction order. Exact values only."""
    if goal is DesignGoal.MAX_THROUGHPUT:
        obj = Fraction(r.cycles)
    elif goal is DesignGoal.MIN_ENERGY:
        obj = r.energy_pj
    else:
        obj = r.energy_pj * r.cycles
    return (obj, r.energy_pj, r.dram_exact, key)


_FIELDS = ("parent_reads", "parent_writes", "child_reads", "child_writes", "unicast", "accumulate")


def _flatten(c: ActivityCounts) -> tuple:
    vec = []
    for b in c.boundaries:
        vec.extend(getattr(b, f) for f in _FIELDS)
        vec.extend(n for _, n in b.multicast)
    return tuple(vec)


def _unflatten(template: ActivityCounts, vec: tuple) -> ActivityCounts:
    it = iter(vec)
    bounds = []
    for b in template.boundaries:
        vals = {f: next(it) for f in _FIELDS}
        mc = tuple((f, next(it)) for f, _ in b.multicast)
        bounds.append(replace(b, multicast=mc, **vals))
    return replace(template, boundaries=tuple(bounds))


def _profile(goal: DesignGoal, m: Mapping, hw: HardwareDescription, counts: ActivityCounts,
             r: EvalResult) -> tuple:
    """Costs an alternative must not exceed to make an order redundant."""
    head = (r.energy_pj, r.dram_exact)
    if goal is DesignGoal.MIN_ENERGY:
        return head
    parts = []
    for lvl in hw.levels:
        if lvl.kind is LevelKind.MEMORY:
            for b in lvl.buffers:
                parts.extend(Fraction(x) for x in counts.level_reads_writes(lvl.name, sorted(b.usage)))
        elif lvl.kind is LevelKind.ROUTING:
            parts.append(Fraction(counts.routing_events(lvl.name)))
    return head + tuple(parts)


def _frontier(cands: list[tuple[int, tuple]]) -> list[int]:
    """Order indices that no other candidate beats.

    ``j`` beats ``i`` when it costs no more anywhere and is strictly cheaper
    in energy or outer accesses, or earlier in construction order. The
    relation is transitive and only lexicographically smaller profiles can
    win, so one sorted pass against the survivors suffices.
    """
    keep: list[tuple[int, tuple]] = []
    for oi, pi in sorted(cands, key=lambda c: (c[1], c[0])):
        for oj, pj in keep:
            if all(a <= b for a, b in zip(pj, pi)) and (pj[0] < pi[0] or pj[1] < pi[1] or oj < oi):
                break
        else:
            keep.append((oi, pi))
    return sorted(oi for oi, _ in keep)


@dataclass
class SearchStats:
    """Mapspace counters.

    ``constructed`` is the size of the whole space and ``evaluated`` the
    number of mappings scored. ``pruned`` counts mappings dropped by the
    utilization thresholds among the factor assignments the search reached.
    Exhaustive search also fills ``invalid`` and ``valid``; branch-and-bound
    instead reports search-tree nodes cut by capacity and by the bound.
    """

    constructed: int = 0
    evaluated: int = 0
    pruned: int = 0
    skeletons: int = 0
    cut_capacity: int = 0
    cut_bound: int = 0
    invalid: int | None = None
    valid: int | None = None

    def merge(self, other: "SearchStats") -> None:
        for k, v in vars(other).items():
            if v is not None:
                setattr(self, k, (getattr(self, k) or 0) + v)


def _evaluate(m: Mapping, hw, cost, zero_skip: bool, skip_index: int):
    """(raw counts, counts after zero skipping, result)."""
    counts = count_activity(m, hw)
    scaled = apply_zero_skip(counts, dict(m.workload.zero_fraction), skip_index) if zero_skip else counts
    return counts, scaled, evaluate_counts(m, hw, scaled, cost)


def _objective(goal: DesignGoal, r: EvalResult) -> Fraction:
    return rank(goal, r, ())[0]


def _search_skeleton(sk, goal, hw, cost, zero_skip, skip, exhaustive):
    """Best (rank, mapping, result) over the loop orders of one skeleton,
    plus the number of evaluations spent."""
    choices = sk.order_choices()
    w = sk.workload
    best = None
    evaluated = 0

    def build(idx):
        return sk.mapping(tuple(ch[i] for ch, i in zip(choices, idx)), idx)

    def offer(m, r):
        nonlocal best
        k = rank(goal, r, m.key)
        if best is None or k < best[0]:
            best = (k, m, r)

    if exhaustive:
        for idx in itertools.product(*(range(len(ch)) for ch in choices)):
            m = build(idx)
            offer(m, _evaluate(m, hw, cost, zero_skip, skip)[2])
            evaluated += 1
        return best, evaluated

    default = tuple(0 for _ in choices)
    base_m = build(default)
    base_counts, base_scaled, base_r = _evaluate(base_m, hw, cost, zero_skip, skip)
    evaluated += 1
    base_vec = _flatten(base_counts)
    per_level = []  # per level: [(order index, delta vector or None)]
    for li, ch in enumerate(choices):
        if len(ch) == 1:
            per_level.append([(0, None)])
            continue
        cands, deltas = [], {}
        for oi in range(len(ch)):
            if oi == 0:
                m, counts, scaled, r = base_m, base_counts, base_scaled, base_r
            else:
                m = build(default[:li] + (oi,) + default[li + 1:])
                counts, scaled, r = _evaluate(m, hw, cost, zero_skip, skip)
                evaluated += 1
            cands.append((oi, _profile(goal, m, hw, scaled, r)))
            deltas[oi] = tuple(a - b for a, b in zip(_flatten(counts), base_vec))
        per_level.append([(oi, deltas[oi] if oi else None) for oi in _frontier(cands)])
    for combo in itertools.product(*per_level):
        idx = tuple(oi for oi, _ in combo)
        m = build(idx)
        if idx == default:
            offer(m, base_r)
            continue
        vec = list(base_vec)
        for _, d in combo:
            if d is not None:
                vec = [a + b for a, b in zip(vec, d)]
        counts = _unflatten(base_counts, tuple(vec))
        if zero_skip:
            counts = apply_zero_skip(counts, dict(w.zero_fraction), skip)
        offer(m, evaluate_counts(m, hw, counts, cost))
        evaluated += 1
    return best, evaluated


def find_optimal_mapping(w: IntraLayerWorkload, hw: HardwareDescription, goal: DesignGoal,
                         constraints: MappingConstraints | None = None,
                         cost: CostTable | None = None, *, prune: bool = True,
                         zero_skip: bool = False, live_cache_bytes: dict | None = None,
                         exhaustive: bool = False, stats: SearchStats | None = None
                         ) -> tuple[Mapping, EvalResult]:
    """Goal-optimal mapping of ``w`` on ``hw`` over the (pruned) valid mapspace.

    The default search is an exact branch-and-bound over factor assignments
    (see :mod:`accel_dse.search`). ``exhaustive`` scores every mapping
    instead; both return the same mapping.
    """
    from .costs import default_costs

    goal = DesignGoal.parse(goal)
    c = constraints or MappingConstraints()
    cost = cost or default_costs()
    skip = hw.skip_index
    run = SearchStats(constructed=count_mappings(w, hw, c))
    if exhaustive:
        sk_stats = SkeletonStats()
        best = None
        for sk in iter_skeletons(w, hw, c, goal if prune else None, live_cache_bytes, sk_stats):
            found, n = _search_skeleton(sk, goal, hw, cost, zero_skip, skip, True)
            run.evaluated += n
            run.skeletons += 1
            if found is not None and (best is None or found[0] < best[0]):
                best = found
        run.invalid, run.pruned, run.valid = sk_stats.invalid, sk_stats.pruned, sk_stats.valid
    else:
        bs = BoundStats()
        best = branch_and_bound(
            w, hw, goal, c, cost,
            lambda sk: _search_skeleton(sk, goal, hw, cost, zero_skip, skip, False),
            prune=prune, zero_skip=zero_skip, live_cache_bytes=live_cache_bytes, stats=bs)
        run.evaluated, run.pruned, run.skeletons = bs.evaluated, bs.pruned, bs.skeletons
        run.cut_capacity, run.cut_bound = bs.cut_capacity, bs.cut_bound
    if stats is not None:
        stats.merge(run)
    if best is None:
        raise NoValidMapping(f"no valid mapping for workload {w.name or w.sequence_position}")
    return best[1], best[2]


def top_mappings(w: IntraLayerWorkload, hw: HardwareDescription, goal: DesignGoal, k: int,
                 constraints: MappingConstraints | None = None, cost: CostTable | None = None,
                 *, prune: bool = True, zero_skip: bool = False,
                 live_cache_bytes: dict | None = None, limit: int = 200_000,
                 ) -> list[tuple[Mapping, EvalResult]]:
    """The ``k`` best mappings by the goal ranking, by scoring every mapping.

    Raises ``ValueError`` when the space holds more than ``limit`` mappings;
    use :func:`find_optimal_mapping` for the optimum of large spaces.
    """
    import heapq

    from .costs import default_costs

    goal = DesignGoal.parse(goal)
    c = constraints or MappingConstraints()
    cost = cost or default_costs()
    skeletons = list(iter_skeletons(w, hw, c, goal if prune else None, live_cache_bytes))
    size = sum(sk.order_count() for sk in skeletons)
    if size > limit:
        raise ValueError(f"{size} mappings exceed the enumeration limit of {limit}")
    scored = []
    for sk in skeletons:
        for m in sk.mappings():
            r = _evaluate(m, hw, cost, zero_skip, hw.skip_index)[2]
            scored.append((rank(goal, r, m.key), m, r))
    return [(m, r) for _, m, r in heapq.nsmallest(k, scored, key=lambda t: t[0])]


# --------------------------------------------------------------------------
# architecture level


class Infeasible(RuntimeError):
    """No architecture of the sweep can run the task."""

    def __init__(self, reasons: list[tuple[str, str]]):
        lines = [f"{name}: {why}" for name, why in reasons] or ["sweep is empty"]
        super().__init__("no feasible architecture\n  " + "\n  ".join(lines))
        self.reasons = reasons


@dataclass
class WorkloadChoice:
    workload: IntraLayerWorkload
    mapping: Mapping
    result: EvalResult


@dataclass
class ArchitectureResult:
    hw: HardwareDescription
    choices: list[WorkloadChoice] = field(default_factory=list)
    total: EvalResult | None = None
    objective: float = float("inf")
    stats: SearchStats = field(default_factory=SearchStats)
    rejected: str | None = None

    @property
    def name(self) -> str:
        return self.hw.name


@dataclass
class ExplorationReport:
    goal: DesignGoal
    architectures: list[ArchitectureResult]
    winner: int
    rejects: list[tuple[str, str]] = field(default_factory=list)

    @property
    def best(self) -> ArchitectureResult:
        return self.architectures[self.winner]

    @property
    def feasible(self) -> list[ArchitectureResult]:
        return [a for a in self.architectures if a.rejected is None]

    def pe_activity_table(self) -> list[tuple[str, str, int]]:
        return pe_activity_table(self)


def pe_activity_table(report: ExplorationReport) -> list[tuple[str, str, int]]:
    """(workload, architecture, active PEs) for every chosen mapping."""
    rows = []
    for a in report.feasible:
        for ch in a.choices:
            rows.append((ch.workload.name, a.name, ch.mapping.spatial_product))
    return rows


@dataclass(frozen=True)
class ExploreOptions:
    goal: DesignGoal = DesignGoal.MIN_ENERGY
    constraints: MappingConstraints = MappingConstraints()
    zero_skip: bool = False
    prune: bool = True


def _passthrough_passes(net: NetworkSpec) -> int:
    n = sum(1 for l in net.layers if l.kind is LayerKind.PASSTHROUGH)
    return n * (2 if net.training else 1)


def evaluate_architecture(hw: HardwareDescription, net: NetworkSpec, cost: CostTable,
                          opts: ExploreOptions = ExploreOptions()) -> ArchitectureResult:
    """Optimal mapping per workload plus inter-layer terms, folded into one result."""
    out = ArchitectureResult(hw)
    intra = generate_intra_workloads(net)
    ops, cache = generate_inter_workloads(net, intra)
    cache_level = hw.levels[hw.cache_index].name
    memo: dict = {}
    for w in intra:
        live = live_cache_elements(cache, w.sequence_position) * hw.precision_bits // 8
        key = (w.bounds, w.strides, w.depthwise, w.zero_fraction, live)
        if key not in memo:
            try:
                memo[key] = find_optimal_mapping(
                    w, hw, opts.goal, opts.constraints, cost, prune=opts.prune,
                    zero_skip=opts.zero_skip, live_cache_bytes={cache_level: live} if live else None,
                    stats=out.stats)
            except NoValidMapping:
                out.rejected = f"no valid mapping for workload {w.sequence_position} ({w.name})"
                return out
        m, r = memo[key]
        m = replace(m, workload=w)
        out.choices.append(WorkloadChoice(w, m, replace(
            r, phase_energy={w.phase.value: r.dynamic_energy},
            pe_active={w.name: m.spatial_product})))

    phase_at = {w.sequence_position: w.phase.value for w in intra}
    pos_cycles = {w.sequence_position: ch.result.cycles for w, ch in zip(intra, out.choices)}
    level_e = {l.name: 0.0 for l in hw.levels}
    phase_e: dict[str, float] = {}
    dynamic = 0.0
    for ch in out.choices:
        dynamic += ch.result.dynamic_energy
        for k, v in ch.result.level_energy.items():
            level_e[k] += v
        ph = ch.workload.phase.value
        phase_e[ph] = phase_e.get(ph, 0.0) + ch.result.dynamic_energy
    pre_cycles = []
    for op in ops:
        cyc = preprocess_cycles(op, hw, cost)
        e = preprocess_energy(op, hw, cost)
        pre_cycles.append(cyc)
        pos_cycles[op.sequence_position] = pos_cycles.get(op.sequence_position, 0) + cyc
        dynamic += e
        level_e[hw.levels[-1].name] += e
        ph = phase_at.get(op.sequence_position, "FW")
        phase_e[ph] = phase_e.get(ph, 0.0) + e
    static = static_energy(cache, pos_cycles, hw, cost)
    level_e[cache_level] += static
    if static:
        phase_e["Static"] = static
    cycles = (sum(ch.result.cycles for ch in out.choices) + sum(pre_cycles)
              + _passthrough_passes(net) * cost.passthrough_delay_cycles)
    out.total = EvalResult(
        cycles=cycles, dynamic_energy=dynamic, static_energy=static, area=total_area(hw, cost),
        clock_hz=cost.clock_hz, level_energy=level_e, phase_energy=phase_e,
        pe_active={ch.workload.name: ch.mapping.spatial_product for ch in out.choices},
        dram_accesses=sum(ch.result.dram_accesses for ch in out.choices),
        macs=sum(ch.result.macs for ch in out.choices))
    out.objective = float(opts.goal.objective(out.total))
    return out


def _evaluate_job(args):
    return evaluate_architecture(*args)


def explore(sweep: ParameterSweep | Iterable[HardwareDescription], net: NetworkSpec,
            cost: CostTable | None = None, opts: ExploreOptions = ExploreOptions(),
            jobs: int = 1) -> ExplorationReport:
    """Evaluate every architecture of the sweep and pick the goal-optimal one.

    Architectures are examined in enumeration order without early exit; the
    winner is the lowest objective, earliest on ties. The report does not
    depend on ``jobs``.
    """
    from .costs import default_costs

    cost = cost or default_costs()
    rejects: list[tuple[str, str]] = []
    if isinstance(sweep, ParameterSweep):
        archs = list(enumerate_architectures(sweep, rejects))
    else:
        archs = list(sweep)
    work = [(hw, net, cost, opts) for hw in archs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_job, work))
    else:
        results = [_evaluate_job(a) for a in work]
    rejects += [(r.name, r.rejected) for r in results if r.rejected]
    feasible = [i for i, r in enumerate(results) if r.rejected is None]
    if not feasible:
        raise Infeasible(rejects)
    winner = min(feasible, key=lambda i: (results[i].objective, i))
    return ExplorationReport(opts.goal, results, winner, rejects)
