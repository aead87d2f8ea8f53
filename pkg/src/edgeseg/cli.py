"""Command line entry point: ``edgeseg run|sweep|validate-config|dump-map|dump-segmentation``.

Fatal errors are reported as one JSON object on stderr and a nonzero exit
code (2 for configuration problems, 1 for anything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .engine import SimulationError, run, world_at
from .localization import map_rows
from .model import ClusteringMode, InvalidConfig, Policy, config_to_dict, load_config, validate_config
from .segmentation import segmentation_rows
from .sweep import (AGG_COLUMNS, RAW_COLUMNS, MissingSeries, aggregate, emit_csv, emit_figures_data,
                    run_sweep, spec_from_config)

log = logging.getLogger("edgeseg")


def _common(p: argparse.ArgumentParser, out=True) -> None:
    p.add_argument("--config", help="YAML config file (defaults are used when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="override a config field, e.g. --set kmeans.outlier_radius=15 (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (sweep: base seed)")
    if out:
        p.add_argument("--out", default="out", help="output directory (default: ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeseg", description="Latency-map segmentation simulator for edge computing")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one cell and write metrics.json")
    _common(p)

    p = sub.add_parser("sweep", help="run the user-count sweep and write raw, aggregate and figure CSVs")
    _common(p)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes (default: all cores)")
    p.add_argument("--counts", type=lambda s: [int(x) for x in s.split(",")], help="comma separated user counts")
    p.add_argument("--reps", type=int, help="repetitions per cell")
    p.add_argument("--policies", type=lambda s: [Policy(x) for x in s.split(",")],
                   help="comma separated subset of Monolithic,SingleLayer,DualLayer")
    p.add_argument("--modes", type=lambda s: [ClusteringMode(x) for x in s.split(",")],
                   default=[ClusteringMode.LAX, ClusteringMode.STRICT],
                   help="clustering modes (default: Lax,Strict; Strict runs DualLayer only)")

    p = sub.add_parser("validate-config", help="check a config file and print the resolved config")
    _common(p, out=False)

    for name, what in (("dump-map", "latency map"), ("dump-segmentation", "subspaces")):
        p = sub.add_parser(name, help=f"write the {what} at a given time as CSV")
        _common(p)
        p.add_argument("--at", type=float, help="simulation time in seconds (default: end of run)")
    return parser


def _fail(kind: str, message: str, details=None, code: int = 1) -> int:
    err = {"error": kind, "message": message}
    if details:
        err["details"] = details
    print(json.dumps(err), file=sys.stderr)
    return code


def _write_rows(path: Path, header, rows) -> Path:
    emit_csv([dict(zip(header, r)) for r in rows], path, header)
    return path


def cmd_run(args, cfg) -> dict:
    rep = run(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = asdict(rep)
    (out / "metrics.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return data


def cmd_sweep(args, cfg) -> dict:
    spec = spec_from_config(cfg, user_counts=args.counts, repetitions=args.reps, policies=args.policies,
                            clustering_modes=args.modes, base_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def progress(i, n):
        if i == n or i % 25 == 0:
            log.info("%d/%d cells", i, n)

    rows = run_sweep(spec, cfg, jobs=args.jobs, progress=progress)
    elapsed = time.perf_counter() - t0
    emit_csv(rows, out / "sweep_raw.csv", RAW_COLUMNS)
    emit_csv(aggregate(rows), out / "sweep_aggregate.csv", AGG_COLUMNS)
    summary = {"cells": len(rows), "errors": sum(bool(r["error"]) for r in rows), "elapsed_s": round(elapsed, 2),
               "jobs": args.jobs}
    try:
        figs = emit_figures_data(rows, out)
    except MissingSeries as exc:
        figs = exc.written
        summary["missing_series"] = exc.missing
    summary["figures"] = [p.name for p in figs]
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def cmd_dump(args, cfg, kind: str) -> dict:
    world = world_at(cfg, args.seed, args.at)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    now = world.clock.now_s
    if kind == "map":
        if world.lmap is None:
            raise SimulationError("no latency map: fewer than 3 edge devices")
        path = _write_rows(out / "latency_map.csv", ["kind", "id", "x", "y", "stress"], map_rows(world.lmap))
        return {"file": str(path), "time_s": now, "stress": world.lmap.stress_value}
    if world.segmentation is None:
        raise SimulationError("Monolithic runs have no segmentation")
    rows = segmentation_rows(world.segmentation, now)
    header = ["time_s", "subspace", "layer", "cx", "cy", "radius", "members", "devices", "churn"]
    if not rows:
        raise SimulationError(f"no subspaces at t={now}")
    path = _write_rows(out / "segmentation.csv", header, rows)
    return {"file": str(path), "time_s": now, "subspaces": len(rows),
            "nomads": int((world.segmentation.assignment < 0).sum())}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        validate_config(cfg)
        if args.command == "validate-config":
            result = {"ok": True, "config": config_to_dict(cfg)}
        elif args.command == "run":
            result = cmd_run(args, cfg)
        elif args.command == "sweep":
            result = cmd_sweep(args, cfg)
        elif args.command == "dump-map":
            result = cmd_dump(args, cfg, "map")
        else:
            result = cmd_dump(args, cfg, "segmentation")
    except InvalidConfig as exc:
        return _fail("InvalidConfig", str(exc), [{"path": p, "message": m} for p, m in exc.errors], code=2)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _fail(type(exc).__name__, str(exc), code=2 if args.command == "validate-config" else 1)
    except Exception as exc:
        return _fail(type(exc).__name__, str(exc))
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
