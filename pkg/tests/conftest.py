from pathlib import Path

import pytest

from accel_dse.arch import enumerate_architectures, parse_sweep
from accel_dse.mapper import MappingConstraints
from accel_dse.workload import generate_intra_workloads, load_document, parse_network

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def config_text(name: str) -> str:
    return (CONFIGS / name).read_text()


def random_net_text(rng, training: bool) -> tuple[str, int, int, int]:
    """A random conv/pool/fc stack and its (conv, fc, pool) counts."""
    layers, h, counts = [], 16, [0, 0, 0]
    for _ in range(int(rng.integers(1, 7))):
        kind = rng.choice(["conv2d", "pool2d", "fc"] if h >= 2 else ["fc"])
        if kind == "conv2d":
            layers.append("{layer: conv2d, out_channel: 2, kernel_size: [1, 1], stride: [1, 1]}")
            counts[0] += 1
        elif kind == "pool2d":
            layers.append("{layer: pool2d, kernel_size: [2, 2], stride: [2, 2]}")
            h //= 2
            counts[2] += 1
        else:
            layers.append("{layer: fc, out_channel: 3}")
            h = 1
            counts[1] += 1
    mode = "Training" if training else "Inference"
    text = (f"network_parameters: {{processing_type: {mode}, input_shape: [16, 16, 1], "
            f"output_shape: 3, batch_size: 1}}\nnetwork_model:\n"
            + "".join(f"  - {l}\n" for l in layers))
    return text, *counts


def first_arch(name: str):
    return next(enumerate_architectures(parse_sweep(config_text(name))))


@pytest.fixture
def configs() -> Path:
    return CONFIGS


@pytest.fixture
def tiny_hw():
    return first_arch("tiny_hardware.yaml")


@pytest.fixture
def tiny_net():
    return parse_network(config_text("tiny_task.yaml"))


@pytest.fixture
def no_bypass():
    return MappingConstraints.parse(config_text("no_bypass.yaml"))


@pytest.fixture
def ref_hw():
    return first_arch("reference_hardware.yaml")


@pytest.fixture
def cm_workload():
    return generate_intra_workloads(parse_network(config_text("cm_workload.yaml")))[0]


@pytest.fixture
def example_mappings(cm_workload, ref_hw):
    from accel_dse.mapping import parse_mapping

    return {k: parse_mapping(load_document(config_text(f"c_{k}_mapping.yaml")),
                             cm_workload, ref_hw)
            for k in ("local", "split")}
