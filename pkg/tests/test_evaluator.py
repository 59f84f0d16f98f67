import numpy as np
import pytest

from accel_dse.costs import default_costs
from accel_dse.evaluator import (apply_zero_skip, count_activity, evaluate_mapping,
                                 level_cycles, preprocess_cycles, preprocess_energy,
                                 static_energy, total_area)
from accel_dse.oracle import compare_with_model, random_hardware, random_mapping, random_workload
from accel_dse.workload import IntraLayerWorkload, Phase, generate_inter_workloads

# Frozen from the literal loop-nest simulation of the two example mappings.
EXAMPLE_ACCESSES = {
    "local": {("DRAM", "filters"): (512, 0), ("DRAM", "inputs"): (16, 0), ("DRAM", "outputs"): (0, 32),
          ("Gbuf", "filters"): (512, 512), ("Gbuf", "inputs"): (128, 16),
          ("Gbuf", "outputs"): (32, 32), ("SP", "filters"): (512, 512),
          ("SP", "inputs"): (512, 512), ("SP", "outputs"): (32, 32)},
    "split": {("DRAM", "filters"): (512, 0), ("DRAM", "inputs"): (16, 0), ("DRAM", "outputs"): (32, 64),
          ("Gbuf", "filters"): (512, 512), ("Gbuf", "inputs"): (32, 16),
          ("Gbuf", "outputs"): (160, 160), ("SP", "filters"): (512, 512),
          ("SP", "inputs"): (128, 64), ("SP", "outputs"): (704, 608)},
}
EXAMPLE_NOC = {
    "local": {("NoC", "filters"): {"unicast": 512, "multicast": {}, "accumulate": 0},
          ("NoC", "inputs"): {"unicast": 0, "multicast": {4: 128}, "accumulate": 0},
          ("NoC", "outputs"): {"unicast": 32, "multicast": {}, "accumulate": 0}},
    "split": {("NoC", "filters"): {"unicast": 512, "multicast": {}, "accumulate": 0},
          ("NoC", "inputs"): {"unicast": 0, "multicast": {2: 32}, "accumulate": 0},
          ("NoC", "outputs"): {"unicast": 96, "multicast": {}, "accumulate": 256}},
}


@pytest.mark.parametrize("key", ["local", "split"])
def test_example_access_counts(example_mappings, ref_hw, key):
    counts = count_activity(example_mappings[key], ref_hw)
    assert counts.macs == 512
    assert counts.accesses() == EXAMPLE_ACCESSES[key]


@pytest.mark.parametrize("key", ["local", "split"])
def test_example_noc_classification(example_mappings, ref_hw, key):
    assert count_activity(example_mappings[key], ref_hw).noc() == EXAMPLE_NOC[key]


@pytest.mark.parametrize("key", ["local", "split"])
def test_example_model_matches_simulation(example_mappings, ref_hw, key):
    assert compare_with_model(example_mappings[key], ref_hw) == []


def test_split_reduction_moves_more_gbuf_output_traffic(example_mappings, ref_hw):
    def gbuf_outputs(m):
        r, w = count_activity(m, ref_hw).accesses()[("Gbuf", "outputs")]
        return r + w

    assert gbuf_outputs(example_mappings["split"]) > gbuf_outputs(example_mappings["local"])


def test_model_matches_simulation_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(40):
        hw = random_hardware(rng)
        w = random_workload(rng, max_bound=4, max_macs=600)
        m = random_mapping(rng, w, hw)
        assert compare_with_model(m, hw) == [], m.compact()


def test_energy_is_sum_of_levels(example_mappings, ref_hw):
    cost = default_costs()
    r = evaluate_mapping(example_mappings["local"], ref_hw, cost)
    assert r.dynamic_energy == pytest.approx(sum(r.level_energy.values()))
    assert r.dynamic_energy == pytest.approx(float(r.energy_pj) * 1e-12)
    assert r.cycles == max(r.level_cycles.values())
    assert r.edp == pytest.approx(r.energy * r.cycles / cost.clock_hz)
    assert r.dram_accesses == 512 + 16 + 32


def test_compute_cycles_use_active_pes(example_mappings, ref_hw):
    cost = default_costs()
    for m in example_mappings.values():
        lc = level_cycles(m, ref_hw, count_activity(m, ref_hw), cost)
        assert lc["PE"] >= 512 // m.spatial_product


def test_zero_skip_scales_macs_and_operands(example_mappings, ref_hw):
    m = example_mappings["local"]
    counts = count_activity(m, ref_hw)
    gbuf = [l.name for l in ref_hw.levels].index("Gbuf")
    skipped = apply_zero_skip(counts, {"inputs": 0.5}, gbuf)
    assert skipped.macs == 256
    assert skipped.accesses()[("SP", "inputs")] == (256, 256)
    # the DRAM boundary sits outside the skip level and is unchanged
    assert skipped.accesses()[("DRAM", "inputs")] == counts.accesses()[("DRAM", "inputs")]
    assert skipped.accesses()[("SP", "filters")] == counts.accesses()[("SP", "filters")]
    assert apply_zero_skip(counts, {}, 3) is counts


def test_zero_skip_lowers_energy(tiny_hw, tiny_net):
    from accel_dse.mapping import parse_mapping
    wg = IntraLayerWorkload(0, Phase.WG, (1, 2, 2, 4, 4, 1, 1), (2, 2),
                            zero_fraction=(("filters", 0.75),), name="wg")
    m = parse_mapping({"mapping": [{"level": "SP", "loops": ["M=2", "C=2", "R=4", "S=4"]}]},
                      wg, tiny_hw)
    cost = default_costs()
    plain = evaluate_mapping(m, tiny_hw, cost)
    skip = evaluate_mapping(m, tiny_hw, cost, zero_skip=True)
    assert skip.macs == plain.macs / 4
    assert skip.dynamic_energy < plain.dynamic_energy


def test_area_grows_with_buffers(configs):
    from accel_dse.arch import enumerate_architectures, parse_sweep
    archs = list(enumerate_architectures(parse_sweep((configs / "tiny_sweep.yaml").read_text())))
    cost = default_costs()
    areas = [total_area(a, cost) for a in archs]
    assert areas[0] < areas[1] < areas[2]
    assert areas[0] < areas[3] < areas[6]
    assert all(a > 0 for a in areas)


def test_preprocess_costs(tiny_hw, tiny_net):
    cost = default_costs()
    ops, _ = generate_inter_workloads(tiny_net)
    real = [op for op in ops if not op.is_identity]
    assert real
    for op in real:
        assert preprocess_cycles(op, tiny_hw, cost) > 0
        assert preprocess_energy(op, tiny_hw, cost) > 0


def test_static_energy_tracks_lifetime(tiny_hw, tiny_net):
    cost = default_costs()
    _, cache = generate_inter_workloads(tiny_net)
    short = static_energy(cache, {p: 10 for p in range(7)}, tiny_hw, cost)
    long = static_energy(cache, {p: 20 for p in range(7)}, tiny_hw, cost)
    assert short > 0
    assert long == pytest.approx(2 * short)
