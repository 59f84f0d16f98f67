import pytest

from accel_dse.arch import enumerate_architectures, parse_sweep
from accel_dse.goals import DesignGoal
from accel_dse.mapper import (MappingConstraints, SkeletonStats, build_mapspace,
                              bypass_combinations, construct_mappings, count_mappings,
                              iter_skeletons, mapping_slots, prune, valid_mapspace_bruteforce)
from accel_dse.mapping import (inner_memory_utilization, parse_mapping, pe_utilization,
                               validate_mapping)
from accel_dse.oracle import naive_mapping_count
from accel_dse.workload import IntraLayerWorkload, Phase

SMALL_HW = """
levels:
  - {name: PE, kind: compute, pe_count: 4}
  - {name: SP, kind: memory, mem_type: scratchpad, size: 24}
  - {name: NoC, kind: routing, topology: bus, routing_size: [2, 2]}
  - {name: DRAM, kind: memory, mem_type: dram, size: N/A}
"""


@pytest.fixture
def small_hw():
    return next(enumerate_architectures(parse_sweep(SMALL_HW)))


@pytest.fixture
def small_w():
    return IntraLayerWorkload(0, Phase.FW, (1, 2, 2, 2, 1, 2, 1), (1, 1), name="small")


def test_example_mappings_valid_and_complete(example_mappings, ref_hw):
    for m in example_mappings.values():
        assert validate_mapping(m, ref_hw) is None
        assert m.dim_product("C") == 16
        assert m.dim_product("M") == 32


def test_mapping_document_round_trip(example_mappings, cm_workload, ref_hw):
    for m in example_mappings.values():
        again = parse_mapping(m.to_doc(), cm_workload, ref_hw)
        assert again == m
        assert again.compact() == m.compact()


def test_compact_form(example_mappings):
    assert example_mappings["split"].compact() == \
        "DRAM[C=2 M=2] Gbuf[C=2 M=2] NoC[C=2@x M=2@y] SP[C=2 M=4]"
    assert example_mappings["local"].spatial_product == 4


def test_parse_mapping_errors(cm_workload, ref_hw):
    with pytest.raises(ValueError, match="axis"):
        parse_mapping({"mapping": [{"level": "NoC", "loops": ["C=2"]}]}, cm_workload, ref_hw)
    with pytest.raises(ValueError, match="unknown loop dimension"):
        parse_mapping({"mapping": [{"level": "SP", "loops": ["Q=2"]}]}, cm_workload, ref_hw)
    with pytest.raises(ValueError, match="repeats"):
        parse_mapping({"mapping": [{"level": "SP", "loops": ["C=2", "C=8"]}]},
                      cm_workload, ref_hw)
    with pytest.raises(ValueError, match="bypass"):
        parse_mapping({"bypass": ["SP.weights"]}, cm_workload, ref_hw)


def test_validator_reports_factorization(cm_workload, ref_hw):
    m = parse_mapping({"mapping": [{"level": "SP", "loops": ["C=16", "M=16"]}]},
                      cm_workload, ref_hw)
    v = validate_mapping(m, ref_hw)
    assert v is not None and "factorization of M" in v.reason


def test_validator_reports_capacity(cm_workload, ref_hw):
    # whole layer in the 520-byte scratchpad: 512 filter + 16 input + 32 output elements
    m = parse_mapping({"mapping": [{"level": "SP", "loops": ["C=16", "M=32"]}]},
                      cm_workload, ref_hw)
    v = validate_mapping(m, ref_hw)
    assert v.level == "SP"
    assert v.overflow == (512 + 16 + 32) * 2 - 520


def test_validator_reports_grid(cm_workload, ref_hw):
    m = parse_mapping({"mapping": [{"level": "NoC", "loops": ["M=32@x"]},
                                   {"level": "SP", "loops": ["C=16"]}]}, cm_workload, ref_hw)
    v = validate_mapping(m, ref_hw)
    assert v.level == "NoC" and "x-axis" in v.reason


def test_live_cache_reduces_capacity(example_mappings, ref_hw):
    m = example_mappings["local"]
    # Gbuf tile: 8x16 filters, 16 inputs, 8 outputs at 2 bytes each
    free = 108 * 1024 - (128 + 16 + 8) * 2
    assert validate_mapping(m, ref_hw, {"Gbuf": free}) is None
    v = validate_mapping(m, ref_hw, {"Gbuf": free + 1})
    assert (v.level, v.overflow) == ("Gbuf", 1)


def test_slots_outer_to_inner(small_hw):
    names = [s.name for s in mapping_slots(small_hw)]
    assert names == ["DRAM", "NoC.x", "NoC.y", "SP"]


@pytest.mark.parametrize("constraints", [
    MappingConstraints(),
    MappingConstraints(pins=(("M", "DRAM", 0),)),
    MappingConstraints(factors=(("R", "SP", 2),)),
    MappingConstraints(factor_lists=(("M", (2,)),), bypass=False),
])
def test_count_matches_independent_count(small_w, small_hw, constraints):
    n = count_mappings(small_w, small_hw, constraints)
    assert n == naive_mapping_count(small_w, small_hw, constraints)
    assert n == sum(1 for _ in construct_mappings(small_w, small_hw, constraints))


def test_construct_respects_pins_and_factors(small_w, small_hw):
    c = MappingConstraints(pins=(("E", "SP", -1),), factors=(("M", "NoC.y", 2),))
    seen = 0
    for m in construct_mappings(small_w, small_hw, c):
        seen += 1
        assert [l.bound for l in m.sub("NoC").loops if l.dim == "M"] == [2]
        sp = m.sub("SP").loops
        if any(l.dim == "E" for l in sp):
            assert sp[-1].dim == "E"
    assert seen > 0


def test_factor_lists_limit_every_loop(small_hw):
    w = IntraLayerWorkload(0, Phase.FW, (1, 8, 1, 1, 1, 1, 1), name="m8")
    c = MappingConstraints(factor_lists=(("M", (2, 8)),))
    for m in construct_mappings(w, small_hw, c):
        assert all(l.bound in (2, 8) for s in m.subs for l in s.loops if l.dim == "M")


def test_bypass_choices(small_hw, ref_hw):
    # no intermediate memory between SP and DRAM
    assert len(bypass_combinations(small_hw, MappingConstraints())) == 1
    assert len(bypass_combinations(ref_hw, MappingConstraints(bypass=False))) == 1
    # Gbuf is the only bypassable level: 2**3 tensor subsets
    assert len(bypass_combinations(ref_hw, MappingConstraints())) == 8


def test_valid_space_matches_brute_force(small_w, small_hw):
    c = MappingConstraints()
    space = build_mapspace(small_w, small_hw, c)
    brute = valid_mapspace_bruteforce(small_w, small_hw, c)
    assert sorted(m.key for m in space.mappings) == sorted(m.key for m in brute.mappings)
    assert space.constructed == space.invalid + space.valid
    for m in space.mappings:
        assert validate_mapping(m, small_hw) is None


def test_skeleton_stats_partition(small_w, small_hw):
    st = SkeletonStats()
    list(iter_skeletons(small_w, small_hw, MappingConstraints(), DesignGoal.MIN_ENERGY, None, st))
    assert st.constructed == st.invalid + st.pruned + st.valid
    assert st.pruned > 0


def test_prune_thresholds(small_w, small_hw):
    c = MappingConstraints()
    space = build_mapspace(small_w, small_hw, c)
    kept = prune(space, c, DesignGoal.MAX_THROUGHPUT)
    assert all(pe_utilization(m, small_hw) >= c.pe_utilization_min for m in kept.mappings)
    kept = prune(space, c, DesignGoal.MIN_ENERGY)
    assert all(inner_memory_utilization(m, small_hw) >= c.inner_memory_utilization_min
               for m in kept.mappings)
    assert prune(space, c, DesignGoal.MIN_EDP).valid == space.valid


def test_constraints_file_forms():
    c = MappingConstraints.parse("pins: {C: {level: Gbuf, position: -1}}\n"
                                 "factors: {M: {NoC.y: 4}, E: [2, 4]}\nbypass: false\n")
    assert c.pins == (("C", "Gbuf", -1),)
    assert c.factors == (("M", "NoC.y", 4),)
    assert c.allowed("E") == frozenset({1, 2, 4})
    assert c.allowed("M") is None
    assert not c.bypass


def test_constraints_reject_bad_values():
    with pytest.raises(ValueError):
        MappingConstraints(pe_utilization_min=1.5)
    with pytest.raises(ValueError):
        MappingConstraints(pins=(("Z", "SP", 0),))
