import csv
import json

import pytest

from accel_dse.arch import enumerate_architectures, parse_sweep
from accel_dse.explorer import ExploreOptions, explore
from accel_dse.report import SUMMARY_FIELDS, write_report
from accel_dse.workload import parse_network

NET = """
network_parameters: {processing_type: Inference, input_shape: [4, 4, 1], output_shape: 2, batch_size: 1}
network_model:
  - {layer: conv2d, out_channel: 2, kernel_size: [1, 1], stride: [1, 1]}
  - {layer: fc, out_channel: output_shape}
"""

SWEEP = """
levels:
  - {name: PE, kind: compute, pe_count: 4}
  - {name: SP, kind: memory, mem_type: scratchpad, size: [4, 32]}
  - {name: NoC, kind: routing, topology: bus, routing_size: [2, 2]}
  - {name: DRAM, kind: memory, mem_type: dram, size: N/A}
"""


@pytest.fixture(scope="module")
def report():
    from accel_dse.mapper import MappingConstraints
    archs = list(enumerate_architectures(parse_sweep(SWEEP)))
    return explore(archs, parse_network(NET),
                   opts=ExploreOptions(constraints=MappingConstraints(bypass=False)))


def test_rejected_architecture_is_reported(report):
    assert [a.rejected is None for a in report.architectures] == [False, True]
    assert report.best.name == "arch-1"


def test_written_files(report, tmp_path):
    paths = write_report(report, tmp_path, plot_data=True)
    names = sorted(p.name for p in paths)
    assert names == ["energy_by_level.png", "energy_by_phase.png", "pe_heatmap.png",
                     "plot_data.csv", "report.json", "report.txt", "summary.csv"]
    assert all(p.stat().st_size > 0 for p in paths)


def test_summary_csv(report, tmp_path):
    write_report(report, tmp_path, figures=False)
    with (tmp_path / "summary.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == SUMMARY_FIELDS
    assert [r[2] for r in rows[1:]] == ["rejected", "ok"]
    ok = dict(zip(rows[0], rows[2]))
    assert float(ok["objective"]) == report.best.objective
    assert ok["parameters"] == "SP.size=32"


def test_report_json(report, tmp_path):
    write_report(report, tmp_path, figures=False)
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["winner"] == "arch-1" and doc["architectures_examined"] == 2
    best = doc["architectures"][1]
    assert [w["name"] for w in best["workloads"]] == ["conv2d0.FW", "fc1.FW"]
    assert best["total"]["energy_j"] == pytest.approx(report.best.total.energy)
    assert "no valid mapping" in doc["architectures"][0]["rejected"]


def test_report_text_names_winner(report, tmp_path):
    write_report(report, tmp_path, figures=False)
    text = (tmp_path / "report.txt").read_text()
    assert "winner: arch-1" in text
    assert "[arch-0] rejected" in text
