"""Command-line pipeline: validate -> abstract -> pareto -> synth -> simulate -> report.

Every writing command drops a manifest next to its outputs recording the
exact invocation, seed, and a hash of everything that affects the result.
Timestamps live only in manifests, so result files are byte-identical
across reruns with the same seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .abstraction import AbstractionConfig, build_mdp, tables_from_json, tables_to_json
from .errors import (
    ConvergenceError,
    EtplanError,
    FileFormatError,
    InfeasibleQueryError,
    InputError,
)
from .harness import compare_theory_empirical, full_kf_baseline, simulate_strategy, trace_to_csv
from .mdp import read_mdp, write_mdp
from .mo_solver import (
    MaxPtar,
    MinCollGivenEnergy,
    MinEnergyGivenPtar,
    ObjectivePoint,
    front_from_json,
    front_to_csv,
    front_to_json,
    pareto_front,
    select_point,
    strategy_from_dict,
    strategy_to_dict,
)
from .numerics import RngStream
from .prism import export_prism
from .scenario import (
    builtin_scenario_names,
    load_builtin_scenario,
    load_scenario,
    scenario_to_dict,
)

__all__ = ["main"]


def _load_scenario_arg(ref: str):
    """Accept either a scenario file path or a bundled scenario name."""
    if not os.path.exists(ref) and ref in builtin_scenario_names():
        return load_builtin_scenario(ref)
    return load_scenario(ref)


def _default_seed() -> int:
    raw = os.environ.get("ETPLAN_SEED", "0")
    try:
        return int(raw)
    except ValueError as exc:
        raise InputError(f"ETPLAN_SEED must be an integer, got {raw!r}") from exc


def _load_json(path) -> dict | list:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: not valid JSON ({exc})") from exc


def _dump_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _sanitize(tag: str) -> str:
    clean = re.sub(r"[^A-Za-z0-9_.-]+", "_", tag).strip("_")
    if not clean:
        raise InputError(f"tag {tag!r} has no usable characters")
    return clean


class _Manifest:
    """Collects invocation metadata while a command runs."""

    def __init__(self, command: str, argv: list[str], seed: int | None, payload: dict):
        self.started = datetime.now(timezone.utc).isoformat()
        self.command = command
        self.argv = argv
        self.seed = seed
        self.payload = payload
        self.outputs: list[str] = []

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"manifest_{self.command}.json"
        _dump_json(
            {
                "command": self.command,
                "argv": self.argv,
                "seed": self.seed,
                "config_hash": _config_hash(self.payload),
                "tool_version": __version__,
                "timestamps": {
                    "started": self.started,
                    "finished": datetime.now(timezone.utc).isoformat(),
                },
                "outputs": sorted(self.outputs),
            },
            path,
        )
        return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args, argv) -> int:
    scenario = _load_scenario_arg(args.scenario)
    print(f"scenario: {scenario.name}")
    print(f"dimension: {scenario.dim}")
    print(f"waypoints: {len(scenario.waypoints)} (segments: {scenario.n_segments})")
    print(f"obstacles: {len(scenario.obstacles)}")
    print(f"thresholds: {scenario.deltas}")
    print(f"comm cost: {scenario.comm_cost}")
    print("all invariants satisfied")
    return 0


def cmd_abstract(args, argv) -> int:
    scenario = _load_scenario_arg(args.scenario)
    try:
        bins_theta, bins_lambda = (int(x) for x in args.bins.split(","))
    except ValueError as exc:
        raise InputError(f"--bins wants 'THETA,LAMBDA', got {args.bins!r}") from exc
    config = AbstractionConfig(
        method=args.method,
        bins_theta=bins_theta,
        bins_lambda=bins_lambda,
        samples_per_action=args.samples,
        pool_cap=args.pool_cap,
        calibration_runs=args.calibration_runs,
    )
    manifest = _Manifest(
        "abstract",
        argv,
        args.seed,
        {
            "scenario": scenario_to_dict(scenario),
            "method": args.method,
            "bins": [bins_theta, bins_lambda],
            "samples": args.samples,
            "pool_cap": args.pool_cap,
            "calibration_runs": args.calibration_runs,
            "seed": args.seed,
        },
    )
    build = build_mdp(scenario, config, RngStream(args.seed, "abstract"))
    out = _out_dir(args)
    write_mdp(build.mdp, out / "mdp.json")
    manifest.outputs.append("mdp.json")
    if build.tables is not None:
        _dump_json(tables_to_json(build.tables), out / "tables.json")
        manifest.outputs.append("tables.json")
    manifest.write(out)
    mdp = build.mdp
    print(f"abstract states: {mdp.n_states} (method {args.method})")
    print(f"actions: {mdp.n_actions} thresholds")
    print(f"diagnostics: {json.dumps(build.diag, sort_keys=True)}")
    return 0


def cmd_pareto(args, argv) -> int:
    mdp = read_mdp(args.mdp)
    manifest = _Manifest(
        "pareto", argv, None, {"mdp": str(args.mdp), "grid": args.grid}
    )
    front = pareto_front(mdp, grid_resolution=args.grid)
    out = _out_dir(args)
    front_to_csv(front, out / "front.csv")
    _dump_json(front_to_json(front), out / "front.json")
    manifest.outputs += ["front.csv", "front.json"]
    manifest.write(out)
    print(f"front vertices: {len(front.vertices)} (grid {args.grid})")
    for i, v in enumerate(front.vertices):
        p = v.point
        print(f"  [{i}] p_tar={p.p_tar:.4f} p_coll={p.p_coll:.4f} e_c={p.e_c:.3f}")
    return 0


def _query_from(args):
    if args.query == "max-ptar":
        return MaxPtar(), "max_ptar"
    if args.query == "min-energy":
        if args.ptar is None:
            raise InputError("--query min-energy needs --ptar")
        return MinEnergyGivenPtar(args.ptar), f"min_energy_ptar{args.ptar:g}"
    if args.energy is None:
        raise InputError("--query min-coll needs --energy")
    return MinCollGivenEnergy(args.energy), f"min_coll_e{args.energy:g}"


def cmd_synth(args, argv) -> int:
    front = front_from_json(_load_json(args.front))
    query, default_tag = _query_from(args)
    tag = _sanitize(args.tag or default_tag)
    strategy, point = select_point(front, query)
    out = _out_dir(args)
    name = f"strategy_{tag}.json"
    _dump_json(
        {
            "tag": tag,
            "query": args.query,
            "predicted": {"p_tar": point.p_tar, "p_coll": point.p_coll, "e_c": point.e_c},
            "strategy": strategy_to_dict(strategy),
        },
        out / name,
    )
    manifest = _Manifest(
        "synth_" + tag,
        argv,
        None,
        {"front": str(args.front), "query": args.query, "ptar": args.ptar, "energy": args.energy},
    )
    manifest.outputs.append(name)
    manifest.write(out)
    print(f"selected point: p_tar={point.p_tar:.4f} p_coll={point.p_coll:.4f} e_c={point.e_c:.3f}")
    print(f"strategy written to {out / name}")
    return 0


def _summary_doc(tag: str, objectives, diag: dict) -> dict:
    return {
        "tag": tag,
        "p_tar": objectives.p_tar,
        "p_coll": objectives.p_coll,
        "p_free": objectives.p_free,
        "e_c_mean": objectives.e_c_mean,
        "e_c_stderr": objectives.e_c_stderr,
        "runs": objectives.runs,
        "diag": {k: v for k, v in diag.items() if k != "clamps"} | {"clamps": diag.get("clamps", {})},
    }


def cmd_simulate(args, argv) -> int:
    scenario = _load_scenario_arg(args.scenario)
    doc = _load_json(args.strategy)
    if not isinstance(doc, dict) or "strategy" not in doc:
        raise FileFormatError(f"{args.strategy}: missing 'strategy' entry")
    strategy = strategy_from_dict(doc["strategy"])
    mdp = read_mdp(args.mdp)
    tables = None
    if args.tables:
        tables = tables_from_json(_load_json(args.tables))
    tag = _sanitize(args.tag or doc.get("tag") or Path(args.strategy).stem)
    manifest = _Manifest(
        "simulate_" + tag,
        argv,
        args.seed,
        {
            "scenario": scenario_to_dict(scenario),
            "strategy": doc["strategy"],
            "mdp": str(args.mdp),
            "runs": args.runs,
            "seed": args.seed,
            "trace_cap": args.trace_cap,
        },
    )
    result = simulate_strategy(
        scenario,
        mdp,
        strategy,
        tables=tables,
        runs=args.runs,
        rng=RngStream(args.seed, "simulate"),
        trace_cap=args.trace_cap,
    )
    out = _out_dir(args)
    summary = _summary_doc(tag, result.objectives, result.diag)
    if "predicted" in doc:
        pred = ObjectivePoint(
            p_tar=float(doc["predicted"]["p_tar"]),
            p_coll=float(doc["predicted"]["p_coll"]),
            e_c=float(doc["predicted"]["e_c"]),
        )
        report = compare_theory_empirical(
            pred, result.objectives, tol_pp=args.tol_pp, tol_e_rel=args.tol_e_rel
        )
        summary["predicted"] = doc["predicted"]
        summary["comparison"] = {
            "dp_tar_pp": report.dp_tar_pp,
            "dp_coll_pp": report.dp_coll_pp,
            "de_c_rel": report.de_c_rel,
            "passed": report.passed,
        }
        print(report.summary())
    _dump_json(summary, out / f"summary_{tag}.json")
    manifest.outputs.append(f"summary_{tag}.json")
    if result.traces:
        trace_to_csv(result.traces, out / f"trace_{tag}.csv", dim=scenario.dim)
        manifest.outputs.append(f"trace_{tag}.csv")
    manifest.write(out)
    o = result.objectives
    print(
        f"runs={o.runs} p_tar={o.p_tar:.4f} p_coll={o.p_coll:.4f} "
        f"p_free={o.p_free:.4f} e_c={o.e_c_mean:.3f}±{o.e_c_stderr:.3f}"
    )
    return 0


def cmd_baseline(args, argv) -> int:
    scenario = _load_scenario_arg(args.scenario)
    manifest = _Manifest(
        "baseline",
        argv,
        args.seed,
        {"scenario": scenario_to_dict(scenario), "runs": args.runs, "seed": args.seed},
    )
    result = full_kf_baseline(
        scenario, runs=args.runs, rng=RngStream(args.seed, "simulate")
    )
    out = _out_dir(args)
    _dump_json(_summary_doc("full_kf", result.objectives, result.diag), out / "baseline.json")
    manifest.outputs.append("baseline.json")
    manifest.write(out)
    o = result.objectives
    print(f"full-KF baseline: p_tar={o.p_tar:.4f} p_coll={o.p_coll:.4f} e_c={o.e_c_mean:.3f}")
    return 0


def cmd_export_prism(args, argv) -> int:
    mdp = read_mdp(args.mdp)
    manifest = _Manifest("export_prism", argv, None, {"mdp": str(args.mdp)})
    out = _out_dir(args)
    export_prism(mdp, out / "model.prism")
    manifest.outputs.append("model.prism")
    manifest.write(out)
    print(f"PRISM model written to {out / 'model.prism'}")
    return 0


_POINT_COLS = ["p_tar", "p_coll", "e_c_mean", "e_c_stderr", "runs"]


def cmd_report(args, argv) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise InputError(f"run directory {run_dir} does not exist")
    front_csv = run_dir / "front.csv"
    summaries = sorted(run_dir.glob("summary_*.json"))
    baseline = run_dir / "baseline.json"
    if not front_csv.exists() and not summaries and not baseline.exists():
        raise InputError(
            f"{run_dir} contains no front.csv, summary_*.json, or baseline.json to report on"
        )

    lines = [f"run report: {run_dir}", ""]
    if front_csv.exists():
        rows = front_csv.read_text(encoding="utf-8").strip().splitlines()
        lines.append(f"pareto front: {len(rows) - 1} vertices (front.csv)")
        lines.append("")

    table_rows = []
    for path in summaries:
        doc = _load_json(path)
        row = {"name": doc.get("tag", path.stem)}
        for col in _POINT_COLS:
            row[col] = doc.get(col)
        pred = doc.get("predicted") or {}
        row["pred_p_tar"] = pred.get("p_tar", "")
        row["pred_p_coll"] = pred.get("p_coll", "")
        row["pred_e_c"] = pred.get("e_c", "")
        table_rows.append(row)
    if baseline.exists():
        doc = _load_json(baseline)
        row = {"name": "full_kf"}
        for col in _POINT_COLS:
            row[col] = doc.get(col)
        row["pred_p_tar"] = row["pred_p_coll"] = row["pred_e_c"] = ""
        table_rows.append(row)

    header = ["name"] + _POINT_COLS + ["pred_p_tar", "pred_p_coll", "pred_e_c"]
    csv_lines = [",".join(header)]
    for row in table_rows:
        csv_lines.append(",".join(str(row[h]) for h in header))
    (run_dir / "selected_points.csv").write_text(
        "\n".join(csv_lines) + "\n", encoding="utf-8"
    )

    if table_rows:
        lines.append("selected strategies (empirical):")
        for row in table_rows:
            lines.append(
                f"  {row['name']}: p_tar={row['p_tar']} p_coll={row['p_coll']} "
                f"e_c={row['e_c_mean']} (runs={row['runs']})"
            )
    text = "\n".join(lines) + "\n"
    (run_dir / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print("wrote selected_points.csv and report.txt")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etplan",
        description=(
            "Synthesize and validate event-triggered measurement strategies "
            "for waypoint navigation under uncertainty."
        ),
    )
    parser.add_argument("--version", action="version", version=f"etplan {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("validate", help="check a scenario file's invariants")
    p.add_argument("scenario", help="scenario file path or bundled scenario name")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("abstract", help="build the finite MDP abstraction")
    p.add_argument("scenario", help="scenario file path or bundled scenario name")
    p.add_argument("--method", type=int, choices=(1, 2), default=2)
    p.add_argument("--bins", default="3,3", help="theta,lambda bin counts (method 2)")
    p.add_argument("--samples", type=int, default=500, help="rollouts per (state, threshold)")
    p.add_argument("--pool-cap", type=int, default=2000, dest="pool_cap")
    p.add_argument("--calibration-runs", type=int, default=200, dest="calibration_runs")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_abstract)

    p = sub.add_parser("pareto", help="trace the Pareto front of a built MDP")
    p.add_argument("mdp")
    p.add_argument("--grid", type=int, default=40, help="barycentric weight-grid resolution")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("synth", help="pick a strategy off a saved front")
    p.add_argument("front")
    p.add_argument("--query", choices=("max-ptar", "min-energy", "min-coll"), required=True)
    p.add_argument("--ptar", type=float, help="reach-probability floor for min-energy")
    p.add_argument("--energy", type=float, help="energy budget for min-coll")
    p.add_argument("--tag", help="output name component (default: derived from query)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="validate a strategy by closed-loop Monte Carlo")
    p.add_argument("scenario", help="scenario file path or bundled scenario name")
    p.add_argument("strategy", help="strategy JSON from `synth`")
    p.add_argument("--mdp", required=True, help="MDP file the strategy refers to")
    p.add_argument("--tables", help="region tables (required for method-2 MDPs)")
    p.add_argument("--runs", type=int, default=3000)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--trace-cap", type=int, default=300, dest="trace_cap")
    p.add_argument("--tol-pp", type=float, default=2.5, dest="tol_pp")
    p.add_argument("--tol-e-rel", type=float, default=0.05, dest="tol_e_rel")
    p.add_argument("--tag")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("baseline", help="full-KF reference run (transmit every step)")
    p.add_argument("scenario", help="scenario file path or bundled scenario name")
    p.add_argument("--runs", type=int, default=3000)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("export-prism", help="write the MDP as a PRISM-language model")
    p.add_argument("mdp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_prism)

    p = sub.add_parser("report", help="aggregate a run directory into tables")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args, argv)
    except InfeasibleQueryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.achievable is not None:
            print(f"achievable bound: {exc.achievable:.6f}", file=sys.stderr)
        return 3
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EtplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
