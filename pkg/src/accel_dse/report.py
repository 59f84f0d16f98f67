"""Exploration report writers: CSV summary, JSON, text, plot data and figures.

Everything written here is a pure function of the report, so two runs with
the same inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .evaluator import EvalResult
from .explorer import ArchitectureResult, ExplorationReport, pe_activity_table

SUMMARY_FIELDS = ["architecture", "parameters", "status", "cycles", "dynamic_energy_j",
                  "static_energy_j", "energy_j", "edp_js", "area_um2", "objective",
                  "mappings_constructed", "mappings_evaluated", "mappings_pruned",
                  "skeletons", "cut_capacity", "cut_bound"]


def _params(a: ArchitectureResult) -> str:
    return ";".join(f"{k}={v}" for k, v in a.hw.params)


def _result_dict(r: EvalResult) -> dict:
    return {"cycles": r.cycles, "dynamic_energy_j": r.dynamic_energy,
            "static_energy_j": r.static_energy, "energy_j": r.energy, "edp_js": r.edp,
            "area_um2": r.area, "macs": r.macs, "dram_accesses": r.dram_accesses,
            "level_energy_j": dict(r.level_energy), "phase_energy_j": dict(r.phase_energy)}


def summary_rows(report: ExplorationReport) -> list[dict]:
    rows = []
    for a in report.architectures:
        s = a.stats
        row = {"architecture": a.name, "parameters": _params(a),
               "status": "rejected" if a.rejected else "ok",
               "mappings_constructed": s.constructed, "mappings_evaluated": s.evaluated,
               "mappings_pruned": s.pruned, "skeletons": s.skeletons,
               "cut_capacity": s.cut_capacity, "cut_bound": s.cut_bound}
        if a.total is not None:
            t = a.total
            row.update(cycles=t.cycles, dynamic_energy_j=repr(t.dynamic_energy),
                       static_energy_j=repr(t.static_energy), energy_j=repr(t.energy),
                       edp_js=repr(t.edp), area_um2=repr(t.area), objective=repr(a.objective))
        rows.append(row)
    return rows


def report_dict(report: ExplorationReport) -> dict:
    archs = []
    for a in report.architectures:
        entry = {"name": a.name, "parameters": dict((k, v) for k, v in a.hw.params),
                 "rejected": a.rejected, "objective": None if a.rejected else a.objective,
                 "stats": vars(a.stats).copy()}
        if a.total is not None and not a.rejected:
            entry["total"] = _result_dict(a.total)
            entry["workloads"] = [
                {"name": ch.workload.name, "phase": ch.workload.phase.value,
                 "position": ch.workload.sequence_position, "bounds": list(ch.workload.bounds),
                 "mapping": ch.mapping.compact(), "active_pes": ch.mapping.spatial_product,
                 "cycles": ch.result.cycles, "energy_j": ch.result.energy}
                for ch in a.choices]
        archs.append(entry)
    return {"goal": report.goal.value, "winner": report.best.name,
            "winner_index": report.winner, "architectures_examined": len(report.architectures),
            "rejects": [list(r) for r in report.rejects], "architectures": archs}


def report_text(report: ExplorationReport) -> str:
    b = report.best
    lines = [f"goal: {report.goal.value}",
             f"architectures examined: {len(report.architectures)}",
             f"feasible: {len(report.feasible)}",
             f"winner: {b.name} ({_params(b) or 'no swept parameters'})",
             f"  objective {b.objective!r}",
             f"  cycles {b.total.cycles}  energy {b.total.energy!r} J  area {b.total.area!r} um2",
             ""]
    for a in report.architectures:
        if a.rejected:
            lines.append(f"[{a.name}] rejected: {a.rejected}")
            continue
        lines.append(f"[{a.name}] objective {a.objective!r}")
        for ch in a.choices:
            lines.append(f"  {ch.workload.name:<14} {ch.mapping.compact()}")
    for name, reason in report.rejects:
        if not any(a.name == name for a in report.architectures):
            lines.append(f"[{name}] rejected: {reason}")
    return "\n".join(lines) + "\n"


def plot_rows(report: ExplorationReport) -> list[tuple]:
    """Long-format rows: (table, architecture, key, value)."""
    rows = []
    for a in report.feasible:
        for level, e in a.total.level_energy.items():
            rows.append(("energy_by_level", a.name, level, repr(e)))
        for phase, e in a.total.phase_energy.items():
            rows.append(("energy_by_phase", a.name, phase, repr(e)))
    for workload, arch, pes in pe_activity_table(report):
        rows.append(("active_pes", arch, workload, pes))
    return rows


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def render_figures(report: ExplorationReport, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    feasible = report.feasible
    names = [a.name for a in feasible]
    written = []
    meta = {"Software": None}

    for table, attr in (("energy_by_level", "level_energy"), ("energy_by_phase", "phase_energy")):
        keys: list[str] = []
        for a in feasible:
            keys += [k for k in getattr(a.total, attr) if k not in keys]
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 2), 3.5))
        bottom = np.zeros(len(names))
        for k in keys:
            vals = np.array([getattr(a.total, attr).get(k, 0.0) for a in feasible])
            ax.bar(names, vals, bottom=bottom, label=k)
            bottom += vals
        ax.set_ylabel("energy (J)")
        ax.legend(fontsize="small")
        ax.tick_params(axis="x", labelrotation=45)
        fig.tight_layout()
        path = out / f"{table}.png"
        fig.savefig(path, dpi=100, metadata=meta)
        plt.close(fig)
        written.append(path)

    table = pe_activity_table(report)
    workloads = list(dict.fromkeys(w for w, _, _ in table))
    grid = np.zeros((len(workloads), len(names)))
    for w, arch, pes in table:
        grid[workloads.index(w), names.index(arch)] = pes
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 3), max(3, 0.25 * len(workloads) + 1)))
    im = ax.imshow(grid, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(names)), names, rotation=45, fontsize="small")
    ax.set_yticks(range(len(workloads)), workloads, fontsize="small")
    fig.colorbar(im, ax=ax, label="active PEs")
    fig.tight_layout()
    path = out / "pe_heatmap.png"
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    written.append(path)
    return written


def write_report(report: ExplorationReport, out: str | Path, *, plot_data: bool = False,
                 figures: bool = True) -> list[Path]:
    """Write summary.csv, report.json and report.txt (plus plot data and PNGs)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "summary.csv"
    rows = summary_rows(report)
    _write_csv(path, SUMMARY_FIELDS, ([r.get(f, "") for f in SUMMARY_FIELDS] for r in rows))
    written.append(path)
    path = out / "report.json"
    path.write_text(json.dumps(report_dict(report), indent=2) + "\n")
    written.append(path)
    path = out / "report.txt"
    path.write_text(report_text(report))
    written.append(path)
    if plot_data:
        path = out / "plot_data.csv"
        _write_csv(path, ["table", "architecture", "key", "value"], plot_rows(report))
        written.append(path)
    if figures and report.feasible:
        written += render_figures(report, out)
    return written
