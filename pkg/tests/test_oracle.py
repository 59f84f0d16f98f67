import numpy as np
import pytest

from accel_dse.mapper import MappingConstraints, count_mappings
from accel_dse.oracle import (OracleLimitError, check_gradients, direct_gradients,
                              naive_mapping_count, random_hardware, random_layer,
                              random_mapping, random_workload, run_nest, simulate)
from accel_dse.workload import IntraLayerWorkload, LayerKind, LayerSpec, Phase


def test_run_nest_matches_plain_correlation():
    rng = np.random.default_rng(0)
    x = rng.integers(-3, 4, size=(1, 5, 5, 2))
    w = rng.integers(-3, 4, size=(3, 3, 2, 2))
    y = run_nest((1, 2, 2, 3, 3, 2, 2), (2, 2), x, w)
    for e in range(2):
        for f in range(2):
            win = x[0, 2 * e:2 * e + 3, 2 * f:2 * f + 3]
            assert np.array_equal(y[0, e, f], np.einsum("rsc,rscm->m", win, w))


def test_direct_gradients_of_one_by_one_conv():
    layer = LayerSpec(LayerKind.CONV2D, (2, 2, 1), out_channels=1, kernel_size=(1, 1))
    x = np.arange(4).reshape(1, 2, 2, 1)
    w = np.array([[[[3]]]])
    dy = np.ones((1, 2, 2, 1), dtype=np.int64)
    dw, dx = direct_gradients(layer, x, w, dy)
    assert dw.item() == 0 + 1 + 2 + 3
    assert np.array_equal(dx, np.full((1, 2, 2, 1), 3))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_nests_exact(seed):
    rng = np.random.default_rng(seed)
    for _ in range(4):
        assert check_gradients(random_layer(rng), rng) == []


def test_strided_padded_layer_gradients():
    rng = np.random.default_rng(1)
    layer = LayerSpec(LayerKind.CONV2D, (7, 6, 2), out_channels=3, kernel_size=(3, 2),
                      padding=(1, 1), stride=(3, 2))
    assert check_gradients(layer, rng) == []


def test_simulation_limit():
    rng = np.random.default_rng(0)
    hw = random_hardware(rng)
    w = IntraLayerWorkload(0, Phase.FW, (4, 4, 4, 3, 3, 4, 4), (1, 1), name="w")
    with pytest.raises(OracleLimitError):
        simulate(random_mapping(rng, w, hw), hw, limit=100)


def test_simulation_counts_every_mac():
    rng = np.random.default_rng(2)
    for _ in range(5):
        hw = random_hardware(rng)
        w = random_workload(rng, max_bound=3, max_macs=200)
        assert simulate(random_mapping(rng, w, hw), hw).macs == w.macs


def test_naive_count_on_random_hardware():
    rng = np.random.default_rng(4)
    for _ in range(5):
        hw = random_hardware(rng, max_levels=4)
        w = random_workload(rng, max_bound=4, max_macs=64)
        c = MappingConstraints(bypass=False)
        assert naive_mapping_count(w, hw, c) == count_mappings(w, hw, c)


def test_random_mapping_is_a_factorization():
    rng = np.random.default_rng(5)
    for _ in range(10):
        hw = random_hardware(rng)
        w = random_workload(rng)
        m = random_mapping(rng, w, hw)
        assert tuple(m.dim_product(d) for d in "NMCRSEF") == w.bounds
