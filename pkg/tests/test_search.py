import itertools

import numpy as np
import pytest

from accel_dse.evaluator import _axis_extents, _fills, _LoopInfo
from accel_dse.explorer import SearchStats, find_optimal_mapping
from accel_dse.goals import DesignGoal
from accel_dse.mapper import MappingConstraints
from accel_dse.mapping import tensor_axes
from accel_dse.oracle import random_workload
from accel_dse.search import min_fill
from accel_dse.workload import IntraLayerWorkload, Phase

SMALL_HW = """
levels:
  - {name: PE, kind: compute, pe_count: 4}
  - {name: SP, kind: memory, mem_type: scratchpad, size: 32}
  - {name: NoC, kind: routing, topology: bus, routing_size: [2, 2]}
  - {name: DRAM, kind: memory, mem_type: dram, size: N/A}
"""


@pytest.fixture(scope="module")
def small_hw():
    from accel_dse.arch import enumerate_architectures, parse_sweep
    return next(enumerate_architectures(parse_sweep(SMALL_HW)))


def _nest(rng):
    """Random tile extents and two temporal levels above it (outermost first)."""
    dims = ["N", "C", "M", "R", "S", "E", "F"]
    tile = {d: int(rng.integers(1, 4)) for d in dims}
    levels = []
    for _ in range(2):
        picked = rng.choice(dims, size=int(rng.integers(1, 4)), replace=False)
        levels.append([(str(d), int(rng.integers(2, 4))) for d in picked])
    return tile, levels


def _with_steps(tile, levels):
    inner = dict(tile)
    out = []
    for loops in reversed(levels):
        stepped = []
        for d, b in reversed(loops):
            stepped.append((d, b, inner[d]))
            inner[d] *= b
        out.append(tuple(reversed(stepped)))
    return list(reversed(out))


@pytest.mark.parametrize("seed", range(25))
def test_min_fill_is_the_minimum_over_orders(seed):
    rng = np.random.default_rng(seed)
    w = IntraLayerWorkload(0, Phase.FW, (1,) * 7, (int(rng.integers(1, 3)), 1), name="t")
    tile, levels = _nest(rng)
    stepped = _with_steps(tile, levels)
    for tensor in ("inputs", "filters", "outputs"):
        axes = tensor_axes(w, tensor)
        ext = _axis_extents(axes, tile)
        best = None
        for orders in itertools.product(*(itertools.permutations(l) for l in stepped)):
            seq = [_LoopInfo(0, d, b, False, s) for order in orders for d, b, s in order]
            f = _fills(seq, axes, ext)
            best = f if best is None else min(best, f)
        sorted_axes = tuple(tuple(sorted(ax.items())) for ax in axes)
        assert min_fill(stepped, sorted_axes, tuple(ext)) == best


CASES = [
    ((1, 2, 2, 3, 1, 2, 2), (1, 1), DesignGoal.MIN_ENERGY),
    ((2, 2, 1, 1, 3, 2, 1), (2, 1), DesignGoal.MAX_THROUGHPUT),
    ((1, 4, 2, 2, 2, 1, 2), (1, 2), DesignGoal.MIN_EDP),
    ((2, 1, 4, 1, 1, 4, 1), (1, 1), DesignGoal.MIN_ENERGY),
]


@pytest.mark.parametrize("bounds,strides,goal", CASES)
@pytest.mark.parametrize("prune", [True, False])
def test_branch_and_bound_equals_exhaustive(small_hw, bounds, strides, goal, prune):
    w = IntraLayerWorkload(0, Phase.FW, bounds, strides, name="w")
    c = MappingConstraints()
    stats = SearchStats()
    fast = find_optimal_mapping(w, small_hw, goal, c, prune=prune, stats=stats)
    slow = find_optimal_mapping(w, small_hw, goal, c, prune=prune, exhaustive=True)
    assert fast[0].key == slow[0].key
    assert fast[1].energy_pj == slow[1].energy_pj
    assert fast[1].cycles == slow[1].cycles
    assert stats.evaluated > 0 and stats.invalid is None


def test_branch_and_bound_equals_exhaustive_on_random_workloads(small_hw):
    rng = np.random.default_rng(3)
    for _ in range(6):
        w = random_workload(rng, max_bound=4, max_macs=300)
        for goal in DesignGoal:
            fast = find_optimal_mapping(w, small_hw, goal, prune=False)
            slow = find_optimal_mapping(w, small_hw, goal, prune=False, exhaustive=True)
            assert fast[0].key == slow[0].key, (w.bounds, goal)


def test_branch_and_bound_with_bypass_zero_skip_and_pins(tiny_hw):
    # the global buffer adds bypass choices to the tree
    w = IntraLayerWorkload(0, Phase.WG, (1, 2, 1, 4, 1, 2, 1), (2, 1),
                           zero_fraction=(("filters", 0.5),), name="wg")
    c = MappingConstraints(pins=(("M", "DRAM", 0),))
    for goal in DesignGoal:
        fast = find_optimal_mapping(w, tiny_hw, goal, c, zero_skip=True)
        slow = find_optimal_mapping(w, tiny_hw, goal, c, zero_skip=True, exhaustive=True)
        assert fast[0].key == slow[0].key


def test_exhaustive_stats_partition(small_hw):
    w = IntraLayerWorkload(0, Phase.FW, (1, 2, 2, 2, 1, 2, 1), (1, 1), name="w")
    stats = SearchStats()
    find_optimal_mapping(w, small_hw, DesignGoal.MIN_ENERGY, exhaustive=True, stats=stats)
    assert stats.invalid + stats.valid + stats.pruned <= stats.constructed
    assert stats.evaluated > 0
