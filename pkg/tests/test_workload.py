import numpy as np
import pytest

from accel_dse.workload import (LayerKind, Phase, PreprocessKind, TaskError,
                                generate_inter_workloads, generate_intra_workloads,
                                live_cache_elements, parse_network, structural_zero_fraction)
from conftest import config_text, random_net_text

ONE_CONV = """
network_parameters: {processing_type: Inference, input_shape: [6, 6, 3], output_shape: 4, batch_size: 2}
network_model:
  - {layer: conv2d, in_shape: input_shape, out_channel: 4, kernel_size: [3, 3], padding: [1, 1], stride: [1, 1]}
"""


def test_sample_document_parses():
    net = parse_network(config_text("sample_task.yaml"))
    assert net.batch_size == 64
    assert net.training
    assert [l.kind for l in net.layers] == [LayerKind.CONV2D, LayerKind.POOL2D, LayerKind.FC]
    assert net.layers[0].out_shape == (55, 55, 64)
    assert net.layers[1].out_shape == (27, 27, 64)
    assert net.layers[2].out_shape == (1, 1, 1000)


def test_empty_layer_list_rejected():
    with pytest.raises(TaskError, match="no layers"):
        parse_network("network_parameters: {input_shape: [4, 4, 1]}\nnetwork_model: []\n")


def test_shape_mismatch_rejected():
    text = """
network_parameters: {input_shape: [8, 8, 3], output_shape: 10}
network_model:
  - {layer: conv2d, in_shape: input_shape, out_channel: 64, kernel_size: 3}
  - {layer: fc, in_shape: [6, 6, 32], out_channel: output_shape}
"""
    with pytest.raises(TaskError, match="shape mismatch"):
        parse_network(text)


def test_syntax_error_has_position():
    with pytest.raises(TaskError) as exc:
        parse_network("network_parameters: {input_shape: [8, 8\nnetwork_model: [")
    assert exc.value.line is not None and exc.value.column is not None


def test_unknown_layer_kind():
    with pytest.raises(TaskError, match="unsupported"):
        parse_network("network_parameters: {input_shape: [4, 4, 1]}\n"
                      "network_model:\n  - {layer: lstm, out_channel: 4}\n")


def test_pool_with_out_channel_rejected():
    with pytest.raises(TaskError, match="preserves channels"):
        parse_network("network_parameters: {input_shape: [4, 4, 1]}\n"
                      "network_model:\n  - {layer: pool2d, kernel_size: 2, out_channel: 3}\n")


def test_single_conv_inference():
    (w,) = generate_intra_workloads(parse_network(ONE_CONV))
    assert w.phase is Phase.FW
    assert w.bounds == (2, 4, 3, 3, 3, 6, 6)
    assert w.macs == 2 * 4 * 3 * 3 * 3 * 6 * 6


def test_alexnet_counts():
    net = parse_network(config_text("alexnet_task.yaml"))
    assert len(generate_intra_workloads(net)) == 29
    assert len(generate_intra_workloads(net.replace_batch(1))) == 29
    inference = parse_network(config_text("alexnet_task.yaml").replace("Training", "Inference"))
    assert len(generate_intra_workloads(inference)) == 11


@pytest.mark.parametrize("training", [False, True])
def test_random_layer_mix_counts(training):
    rng = np.random.default_rng(7)
    for _ in range(30):
        text, c, f, p = random_net_text(rng, training)
        n = len(generate_intra_workloads(parse_network(text)))
        assert n == (3 * (c + f) + 2 * p - 1 if training else c + f + p)


def test_training_schedule_order():
    net = parse_network(config_text("tiny_task.yaml"))
    names = [w.name for w in generate_intra_workloads(net)]
    assert names == ["conv2d0.FW", "pool2d1.PoolFW", "fc2.FW", "fc2.BW", "fc2.WG",
                     "pool2d1.PoolBW", "conv2d0.WG"]
    assert [w.sequence_position for w in generate_intra_workloads(net)] == list(range(7))


def test_wg_filter_extent_is_output_times_stride():
    net = parse_network(config_text("alexnet_task.yaml"))
    wg = [w for w in generate_intra_workloads(net) if w.name == "conv2d0.WG"][0]
    n, m, c, r, s, e, f = wg.bounds
    assert (r, s) == (220, 220)
    assert (e, f) == (11, 11)
    assert (n, m, c) == (3, 96, 1)


def test_macs_invariant_across_phases():
    net = parse_network(config_text("tiny_task.yaml"))
    by = {w.name: w for w in generate_intra_workloads(net)}
    fw = by["fc2.FW"]
    assert by["fc2.BW"].macs == fw.macs == by["fc2.WG"].macs


def test_input_extent_relation():
    net = parse_network(config_text("sample_task.yaml"))
    w = generate_intra_workloads(net)[0]
    p, q = w.input_hw
    n, m, c, r, s, e, f = w.bounds
    u, v = w.strides
    assert p == (e - 1) * u + r and q == (f - 1) * v + s


def test_preprocess_ops_and_zero_fractions():
    net = parse_network(config_text("tiny_task.yaml"))
    ops, _ = generate_inter_workloads(net)
    kinds = {(op.sequence_position, op.kind) for op in ops}
    assert (0, PreprocessKind.PAD) in kinds  # forward padding of the conv
    ups = [op for op in ops if op.kind is PreprocessKind.UPSAMPLE and not op.is_identity]
    assert ups and all(structural_zero_fraction(op) == pytest.approx(0.75) for op in ups)
    for op in ops:
        if op.kind is PreprocessKind.PAD:
            z = structural_zero_fraction(op)
            nonzero = np.prod(op.in_shape)
            assert z == pytest.approx((op.out_elements - nonzero) / op.out_elements)


def test_wg_zero_fraction_from_upsampling():
    net = parse_network(config_text("tiny_task.yaml"))
    wg = [w for w in generate_intra_workloads(net) if w.name == "conv2d0.WG"][0]
    assert wg.zeros("filters") == pytest.approx(1 - 1 / 4)


def test_activation_cache_entries():
    net = parse_network(config_text("tiny_task.yaml"))
    intra = generate_intra_workloads(net)
    _, cache = generate_inter_workloads(net, intra)
    pos = {w.name: w.sequence_position for w in intra}
    spans = {e.layer_index: (e.created_at, e.freed_at) for e in cache}
    assert spans[0] == (pos["conv2d0.FW"], pos["conv2d0.WG"])
    assert spans[2] == (pos["pool2d1.PoolFW"], pos["fc2.WG"])
    assert all(e.created_at < e.freed_at and e.elements > 0 for e in cache)
    # the conv input (8x8x2) is live for the whole schedule
    assert live_cache_elements(cache, pos["fc2.BW"]) >= 8 * 8 * 2


def test_inference_has_no_cache():
    _, cache = generate_inter_workloads(parse_network(ONE_CONV))
    assert cache == []
