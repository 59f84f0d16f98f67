"""Command-line front end.

Exit codes: 0 success, 2 unreadable or malformed input, 3 infeasible (no
valid mapping or architecture), 4 oracle mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .arch import HardwareDescription, HardwareError, enumerate_architectures, parse_sweep
from .costs import CostTable, default_costs, parse_costs
from .evaluator import evaluate_mapping
from .explorer import (ExploreOptions, Infeasible, NoValidMapping, SearchStats, explore,
                       find_optimal_mapping, top_mappings)
from .goals import DesignGoal
from .mapper import MappingConstraints, SkeletonStats, iter_skeletons
from .mapping import parse_mapping, validate_mapping
from .workload import (NetworkSpec, TaskError, generate_inter_workloads,
                       generate_intra_workloads, live_cache_elements, load_document,
                       parse_network)

EXIT_OK, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_ORACLE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    task: Path | None
    hardware: Path | None
    constraints: Path | None
    costs: Path | None
    goal: DesignGoal
    out: Path | None
    jobs: int = 1
    seed: int = 0
    zero_skip: bool = False
    prune: bool = True
    plot_data: bool = False


def _load(path: Path | None, parse, what: str):
    if path is None:
        raise CliError(EXIT_PARSE, f"missing --{what}")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"{path}: cannot read ({exc.strerror})") from None
    try:
        return parse(text)
    except (TaskError, HardwareError, ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}") from None


def _network(cfg: RunConfig) -> NetworkSpec:
    return _load(cfg.task, parse_network, "task")


def _constraints(cfg: RunConfig) -> MappingConstraints:
    if cfg.constraints is None:
        return MappingConstraints()
    return _load(cfg.constraints, MappingConstraints.parse, "constraints")


def _costs(cfg: RunConfig) -> CostTable:
    return default_costs() if cfg.costs is None else _load(cfg.costs, parse_costs, "costs")


def _architectures(cfg: RunConfig) -> tuple[list[HardwareDescription], list]:
    sweep = _load(cfg.hardware, parse_sweep, "hardware")
    rejects: list = []
    try:
        archs = list(enumerate_architectures(sweep, rejects))
    except (HardwareError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"{cfg.hardware}: {exc}") from None
    return archs, rejects


def _select_arch(cfg: RunConfig, selector: str | None) -> HardwareDescription:
    archs, rejects = _architectures(cfg)
    if not archs:
        reasons = "; ".join(f"{n}: {r}" for n, r in rejects) or "empty sweep"
        raise CliError(EXIT_INFEASIBLE, f"no valid architecture ({reasons})")
    if selector is None:
        return archs[0]
    for i, hw in enumerate(archs):
        if selector in (str(i), hw.name):
            return hw
    raise CliError(EXIT_PARSE, f"no architecture {selector!r}; have "
                   + ", ".join(hw.name for hw in archs))


def _select_workloads(net: NetworkSpec, selector: str | None):
    intra = generate_intra_workloads(net)
    if selector is None:
        return intra
    chosen = [w for w in intra if selector in (w.name, str(w.sequence_position))]
    if not chosen:
        raise CliError(EXIT_PARSE, f"no workload {selector!r}; have "
                       + ", ".join(w.name for w in intra))
    return chosen


def _live_bytes(net: NetworkSpec, hw: HardwareDescription, w) -> dict | None:
    _, cache = generate_inter_workloads(net)
    live = live_cache_elements(cache, w.sequence_position) * hw.precision_bits // 8
    return {hw.levels[hw.cache_index].name: live} if live else None


def _out_dir(cfg: RunConfig) -> Path | None:
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _fmt_bounds(b) -> str:
    return " ".join(f"{d}={v}" for d, v in zip("NMCRSEF", b))


# --------------------------------------------------------------------------
# commands


def cmd_workloads(cfg: RunConfig) -> int:
    net = _network(cfg)
    intra = generate_intra_workloads(net)
    ops, cache = generate_inter_workloads(net, intra)
    rows = []
    print(f"{'pos':>4}  {'workload':<14} {'phase':<5} {'bounds':<42} stride  zeros")
    for w in intra:
        zeros = ",".join(f"{t}={z:.3f}" for t, z in w.zero_fraction if z) or "-"
        print(f"{w.sequence_position:>4}  {w.name:<14} {w.phase.value:<5} "
              f"{_fmt_bounds(w.bounds):<42} {w.strides[0]}x{w.strides[1]}    {zeros}")
        rows.append(("intra", w.sequence_position, w.name, w.phase.value,
                     _fmt_bounds(w.bounds), f"{w.strides[0]}x{w.strides[1]}", zeros))
    print(f"\npreprocessing ({len(ops)})")
    for op in ops:
        print(f"{op.sequence_position:>4}  {op.kind.value:<16} layer {op.layer_index:<3} "
              f"{op.in_shape} -> {op.out_shape}"
              + ("  (identity)" if op.is_identity else ""))
        rows.append(("preprocess", op.sequence_position, op.kind.value, "",
                     f"{op.in_shape}->{op.out_shape}", "", ""))
    print(f"\ncache entries ({len(cache)})")
    for e in cache:
        print(f"  layer {e.layer_index:<3} {e.elements:>10} elements  live {e.created_at}..{e.freed_at}")
        rows.append(("cache", e.created_at, f"layer{e.layer_index}", "", str(e.elements),
                     f"{e.created_at}..{e.freed_at}", ""))
    out = _out_dir(cfg)
    if out is not None:
        with (out / "workloads.csv").open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["record", "position", "name", "phase", "shape", "extra", "zeros"])
            wr.writerows(rows)
    return EXIT_OK


def cmd_map(cfg: RunConfig, arch: str | None, workload: str | None, top: int,
            limit: int, count: bool = False) -> int:
    net = _network(cfg)
    hw = _select_arch(cfg, arch)
    c, cost = _constraints(cfg), _costs(cfg)
    doc = {"architecture": hw.name, "goal": cfg.goal.value, "workloads": []}
    infeasible = False
    for w in _select_workloads(net, workload):
        live = _live_bytes(net, hw, w)
        entry = {"workload": w.name, "bounds": list(w.bounds)}
        if count:
            st = SkeletonStats()
            for _ in iter_skeletons(w, hw, c, cfg.goal if cfg.prune else None, live, st):
                pass
            print(f"{w.name}: constructed {st.constructed}  invalid {st.invalid}  "
                  f"pruned {st.pruned}  valid {st.valid}")
            entry.update(constructed=st.constructed, invalid=st.invalid, pruned=st.pruned,
                         valid=st.valid)
        entry["top"] = []
        search = SearchStats()
        try:
            if top > 1:
                best = top_mappings(w, hw, cfg.goal, top, c, cost, prune=cfg.prune,
                                    zero_skip=cfg.zero_skip, live_cache_bytes=live, limit=limit)
            else:
                best = [find_optimal_mapping(w, hw, cfg.goal, c, cost, prune=cfg.prune,
                                             zero_skip=cfg.zero_skip, live_cache_bytes=live,
                                             stats=search)]
                if not count:
                    print(f"{w.name}: constructed {search.constructed}  "
                          f"evaluated {search.evaluated}  pruned {search.pruned}")
                entry["search"] = {k: v for k, v in vars(search).items() if v is not None}
        except NoValidMapping as exc:
            print(f"  {exc}")
            infeasible = True
            best = []
        except ValueError as exc:
            raise CliError(EXIT_PARSE, f"{w.name}: {exc}; lower --top") from None
        for i, (m, r) in enumerate(best, 1):
            print(f"  #{i} objective {float(cfg.goal.objective(r))!r}  {m.compact()}")
            entry["top"].append({"objective": float(cfg.goal.objective(r)), "cycles": r.cycles,
                                 "energy_j": r.energy, "mapping": m.to_doc()})
        doc["workloads"].append(entry)
    out = _out_dir(cfg)
    if out is not None:
        (out / "map.json").write_text(json.dumps(doc, indent=2) + "\n")
        for entry in doc["workloads"]:
            if entry["top"]:
                best = dict(entry["top"][0]["mapping"], workload=entry["workload"])
                (out / f"{entry['workload']}.mapping.yaml").write_text(
                    yaml.safe_dump(best, sort_keys=False))
    return EXIT_INFEASIBLE if infeasible else EXIT_OK


def cmd_evaluate(cfg: RunConfig, mapping_path: Path, arch: str | None,
                 workload: str | None) -> int:
    net = _network(cfg)
    hw = _select_arch(cfg, arch)
    doc = _load(mapping_path, load_document, "mapping")
    if not isinstance(doc, dict):
        raise CliError(EXIT_PARSE, f"{mapping_path}: expected a mapping document")
    selector = workload or (str(doc["workload"]) if "workload" in doc else None)
    w = _select_workloads(net, selector)[0]
    try:
        m = parse_mapping(doc, w, hw)
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_PARSE, f"{mapping_path}: {exc}") from None
    violation = validate_mapping(m, hw, _live_bytes(net, hw, w))
    if violation is not None:
        raise CliError(EXIT_INFEASIBLE, f"{mapping_path}: invalid mapping: {violation}")
    r = evaluate_mapping(m, hw, _costs(cfg), zero_skip=cfg.zero_skip)
    record = {"workload": w.name, "architecture": hw.name, "mapping": m.compact(),
              "cycles": r.cycles, "dynamic_energy_j": r.dynamic_energy,
              "static_energy_j": r.static_energy, "energy_j": r.energy, "edp_js": r.edp,
              "area_um2": r.area, "macs": r.macs, "dram_accesses": r.dram_accesses,
              "pe_active": m.spatial_product, "level_energy_j": dict(r.level_energy),
              "level_cycles": dict(r.level_cycles)}
    print(m.describe())
    for k, v in record.items():
        if k != "mapping":
            print(f"{k}: {v}")
    out = _out_dir(cfg)
    if out is not None:
        (out / "evaluation.json").write_text(json.dumps(record, indent=2) + "\n")
    return EXIT_OK


def cmd_explore(cfg: RunConfig, figures: bool = True) -> int:
    from .report import report_text, write_report

    net = _network(cfg)
    c, cost = _constraints(cfg), _costs(cfg)
    archs, rejects = _architectures(cfg)
    opts = ExploreOptions(goal=cfg.goal, constraints=c, zero_skip=cfg.zero_skip, prune=cfg.prune)
    try:
        report = explore(archs, net, cost, opts, jobs=cfg.jobs)
    except Infeasible as exc:
        reasons = rejects + exc.reasons
        raise CliError(EXIT_INFEASIBLE, "no valid architecture"
                       + "".join(f"\n  {n}: {r}" for n, r in reasons)) from None
    report.rejects = rejects + report.rejects
    print(report_text(report), end="")
    if cfg.out is not None:
        write_report(report, cfg.out, plot_data=cfg.plot_data, figures=figures)
    return EXIT_OK


def cmd_validate_oracle(cfg: RunConfig, samples: int, gradients: int, max_levels: int,
                        max_bound: int, limit: int) -> int:
    from .oracle import (OracleLimitError, check_gradients, compare_with_model,
                         random_hardware, random_layer, random_mapping, random_workload)

    rng = np.random.default_rng(cfg.seed)
    rows = []
    for i in range(samples):
        hw = random_hardware(rng, max_levels)
        w = random_workload(rng, max_bound)
        m = random_mapping(rng, w, hw)
        try:
            diffs = compare_with_model(m, hw, limit)
        except OracleLimitError as exc:
            diffs = [str(exc)]
        rows.append(("activity", i, f"{_fmt_bounds(w.bounds)} levels={len(hw.levels)}", diffs))
    for i in range(gradients):
        layer = random_layer(rng)
        rows.append(("gradient", i, f"{layer.kind.value} in={layer.in_shape} "
                     f"k={layer.kernel_size} s={layer.stride} p={layer.padding}",
                     check_gradients(layer, rng)))
    failed = 0
    for kind, i, desc, diffs in rows:
        status = "FAIL" if diffs else "pass"
        failed += bool(diffs)
        print(f"{kind:<9}{i:>5}  {status}  {desc}")
        for d in diffs:
            print(f"      {d}")
    print(f"\n{len(rows) - failed}/{len(rows)} passed")
    out = _out_dir(cfg)
    if out is not None:
        with (out / "oracle.csv").open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["check", "index", "instance", "status", "detail"])
            for kind, i, desc, diffs in rows:
                wr.writerow([kind, i, desc, "fail" if diffs else "pass", "; ".join(diffs)])
    return EXIT_ORACLE if failed else EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--task", type=Path, help="task description (YAML/JSON)")
    common.add_argument("--hardware", type=Path, help="hardware description or sweep")
    common.add_argument("--constraints", type=Path, help="mapping constraints file")
    common.add_argument("--costs", type=Path, help="cost table (default: built-in)")
    common.add_argument("--goal", default="energy", choices=["throughput", "energy", "edp"])
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel architecture evaluations")
    common.add_argument("--seed", type=int, default=0, help="seed for sampled instances")
    common.add_argument("--zero-skip", action="store_true",
                        help="model zero-skipping circuits on structural zeros")
    common.add_argument("--no-prune", action="store_true", help="disable utilization pruning")
    common.add_argument("--plot-data", action="store_true",
                        help="also write long-format plot data")

    parser = argparse.ArgumentParser(prog="accel-dse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("workloads", parents=[common], help="list intra/inter-layer workloads")
    p = sub.add_parser("map", parents=[common], help="mapspace statistics and best mappings")
    p.add_argument("--arch", help="architecture index or name (default: first)")
    p.add_argument("--workload", help="workload name or position (default: all)")
    p.add_argument("--top", type=int, default=1, help="number of mappings to list")
    p.add_argument("--limit", type=int, default=200_000,
                   help="largest mapspace scored exhaustively for --top > 1")
    p.add_argument("--count", action="store_true",
                   help="enumerate the whole mapspace for invalid/pruned/valid counts")
    p = sub.add_parser("evaluate", parents=[common], help="evaluate an explicit mapping")
    p.add_argument("--mapping", type=Path, required=True)
    p.add_argument("--arch")
    p.add_argument("--workload")
    p = sub.add_parser("explore", parents=[common], help="search the architecture sweep")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    p = sub.add_parser("validate-oracle", parents=[common],
                       help="compare the analytic model with literal simulation")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--gradients", type=int, default=100)
    p.add_argument("--max-levels", type=int, default=4)
    p.add_argument("--max-bound", type=int, default=6)
    p.add_argument("--limit", type=int, default=10_000_000)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(task=args.task, hardware=args.hardware, constraints=args.constraints,
                    costs=args.costs, goal=DesignGoal.parse(args.goal), out=args.out,
                    jobs=max(1, args.jobs), seed=args.seed, zero_skip=args.zero_skip,
                    prune=not args.no_prune, plot_data=args.plot_data)
    try:
        if args.command == "workloads":
            return cmd_workloads(cfg)
        if args.command == "map":
            return cmd_map(cfg, args.arch, args.workload, args.top, args.limit, args.count)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.mapping, args.arch, args.workload)
        if args.command == "explore":
            return cmd_explore(cfg, figures=not args.no_figures)
        return cmd_validate_oracle(cfg, args.samples, args.gradients, args.max_levels,
                                   args.max_bound, args.limit)
    except CliError as exc:
        print(f"accel-dse: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
