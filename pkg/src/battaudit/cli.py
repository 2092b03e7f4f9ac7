"""Command-line entry point.

Subcommands: ingest, detect, dq, indicators, wdf, loso, audit, labcell,
synth. Exit codes: 0 success, 2 schema error, 3 insufficient data,
4 configuration error.

Analysis commands read ``telemetry.csv`` (or .jsonl) and ``vehicles.csv``
from --data and deliberately never open ground-truth files, so a synthetic
fleet's plant stays invisible to the audit.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import dq as dqmod
from . import pipeline, report, sessions
from .config import RunConfig, load_config
from .corpus import regenerate_corpus
from .errors import BattAuditError, ConfigError, InsufficientDataError, SchemaError
from .synth import FleetScenario, write_fleet, write_labcell
from .telemetry import ingest_stream, load_specs


def _data_paths(data_dir: str) -> tuple[Path, Path]:
    d = Path(data_dir)
    specs = d / "vehicles.csv"
    telemetry = None
    for name in ("telemetry.csv", "telemetry.jsonl"):
        if (d / name).exists():
            telemetry = d / name
            break
    if telemetry is None or not specs.exists():
        raise SchemaError(f"{d}: expected telemetry.csv (or .jsonl) and vehicles.csv")
    return telemetry, specs


def _load(data_dir: str, cfg: RunConfig):
    telemetry, specs_path = _data_paths(data_dir)
    specs = load_specs(specs_path)
    result = ingest_stream(telemetry, specs, cfg.max_inversion_frac)
    return result, specs


def _config_from_args(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key in ("ridge_alpha", "min_model_n", "bootstrap_n"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return load_config(getattr(args, "config", None), overrides)


def cmd_ingest(args) -> int:
    cfg = _config_from_args(args)
    result, specs = _load(args.data, cfg)
    by_platform: dict = {}
    for vid, s in result.streams.items():
        entry = by_platform.setdefault(s.spec.platform, {"vehicles": 0, "records": 0, "with_soh": 0})
        entry["vehicles"] += 1
        entry["records"] += len(s)
        entry["with_soh"] += int(s.spec.bms_soh is not None)
    out = {
        "rows": result.n_rows,
        "records": result.n_records,
        "rejects": result.reject_counts,
        "rejected_streams": result.rejected_streams,
        "platforms": by_platform,
    }
    print(json.dumps(out, sort_keys=True, indent=2))
    if not result.streams:
        raise InsufficientDataError("no valid vehicle streams in input")
    return 0


def cmd_detect(args) -> int:
    cfg = _config_from_args(args)
    result, specs = _load(args.data, cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    all_segments = []
    reports = {}
    by_platform: dict = {}
    for vid, s in sorted(result.streams.items()):
        by_platform.setdefault(s.spec.platform, []).append(s)
    for platform, members in sorted(by_platform.items()):
        step = pipeline.platform_step_mv(members, cfg)
        flags, phys = [], []
        for s in members:
            flags += sessions.detect_flag_sessions(s, cfg)
            phys += sessions.detect_physics_sessions(
                s, cfg, quant_step_v=step / 1000.0 if step else None)
        all_segments += flags + phys
        reports[platform] = sessions.concordance(flags, phys, cfg).to_dict()
        reports[platform]["quant_step_mv"] = step
    sessions.segments_to_dataframe(all_segments).to_csv(outdir / "segments.csv", index=False)
    report.write_report({"concordance": reports, "config": cfg.to_dict(),
                         "config_hash": cfg.hash()}, outdir / "detect.json")
    print(json.dumps(reports, sort_keys=True, indent=2))
    return 0


def _audit_bundle(args, cfg: RunConfig) -> dict:
    result, specs = _load(args.data, cfg)
    if not result.streams:
        raise InsufficientDataError("no valid vehicle streams in input")
    rep = pipeline.run_audit(result.streams, specs, cfg)
    rep["ingest"] = {
        "rows": result.n_rows,
        "records": result.n_records,
        "rejects": result.reject_counts,
    }
    rep["seed"] = cfg.seed
    return rep


def cmd_dq(args) -> int:
    cfg = _config_from_args(args)
    rep = _audit_bundle(args, cfg)
    outdir = Path(args.out)
    tables = pipeline.export_tables(rep)
    report.write_tables({"dq": tables["dq"]}, outdir)
    keep = {
        name: {k: entry.get(k) for k in
               ("n_dq", "dq_cv", "window", "consistency", "ground_truth", "quant_step_mv")}
        for name, entry in rep["platforms"].items()
    }
    report.write_report({"platforms": keep, "config": cfg.to_dict(),
                         "config_hash": cfg.hash(), "seed": cfg.seed}, outdir / "dq.json")
    print(json.dumps(report.jsonable(keep), sort_keys=True, indent=2))
    return 0


def cmd_indicators(args) -> int:
    cfg = _config_from_args(args)
    rep = _audit_bundle(args, cfg)
    outdir = Path(args.out)
    tables = pipeline.export_tables(rep)
    report.write_tables({"indicators": tables["indicators"],
                         "profiles": tables["profiles"]}, outdir)
    print(f"wrote indicators for {len(tables['indicators'])} vehicles to {outdir}")
    return 0


def cmd_wdf(args) -> int:
    cfg = _config_from_args(args)
    rep = _audit_bundle(args, cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    out = {"models": rep["models"]["per_platform"], "config": cfg.to_dict(),
           "config_hash": cfg.hash(), "seed": cfg.seed}
    report.write_report(out, outdir / "wdf.json")
    print(json.dumps(report.jsonable(rep["models"]["per_platform"]), sort_keys=True, indent=2))
    return 0


def cmd_loso(args) -> int:
    from .wdf import render_r2

    cfg = _config_from_args(args)
    rep = _audit_bundle(args, cfg)
    loso = rep["models"]["loso"]
    rendered = {}
    if "bins" in loso:
        rendered = {
            "loso_r2": {k: render_r2(v) for k, v in loso["bins"]["loso_r2"].items()},
            "pairwise_r2": {k: render_r2(v) for k, v in loso["bins"]["pairwise_r2"].items()},
        }
    out = {"loso": loso, "rendered": rendered, "config": cfg.to_dict(),
           "config_hash": cfg.hash(), "seed": cfg.seed}
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report.write_report(out, outdir / "loso.json")
    print(json.dumps(report.jsonable(rendered or loso), sort_keys=True, indent=2))
    return 0


def cmd_audit(args) -> int:
    cfg = _config_from_args(args)
    if getattr(args, "seed", None) is None:
        raise ConfigError("audit requires --seed (bootstrap-bearing command)")
    rep = _audit_bundle(args, cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tables = pipeline.export_tables(rep)
    report.write_tables(tables, outdir)
    report.write_report(rep, outdir / "audit.json")
    summary = tables["platform_summary"]
    print(summary.to_string(index=False))
    print(f"report bundle written to {outdir}")
    return 0


def cmd_labcell(args) -> int:
    cfg = _config_from_args(args)
    traces = pd.read_csv(args.traces)
    rpt = pd.read_csv(args.rpt).sort_values("cycle")
    need = {"cycle", "timestamp", "voltage", "current"}
    if not need.issubset(traces.columns):
        raise SchemaError(f"{args.traces}: needs columns {sorted(need)}")
    if not {"cycle", "rpt_ah"}.issubset(rpt.columns):
        raise SchemaError(f"{args.rpt}: needs columns cycle, rpt_ah")
    cycles = [g for _, g in traces.groupby("cycle", sort=True)]
    grid = dqmod.labcell_window_sweep(cycles, rpt["rpt_ah"].to_numpy())
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    grid.to_csv(outdir / "labcell_sweep.csv", index=False)
    ok = grid["rho"].dropna()
    print(f"{len(grid)} windows; rho range [{ok.min():.3f}, {ok.max():.3f}]"
          if len(ok) else f"{len(grid)} windows; no usable cycles")
    return 0


def cmd_synth(args) -> int:
    if args.manifest:
        out = regenerate_corpus(args.manifest, args.out)
        print(json.dumps({k: out[k] for k in ("ok", "mismatches")}, sort_keys=True, indent=2))
        return 0 if out["ok"] else 3
    if args.scenario:
        scenario = FleetScenario.from_json(Path(args.scenario).read_text())
        if args.seed is not None:
            scenario.seed = args.seed
    else:
        if args.seed is None:
            raise ConfigError("synth requires --seed (or a scenario file)")
        from .synth import PlatformTemplate
        scenario = FleetScenario(
            seed=args.seed,
            duration_days=args.days,
            platforms=[PlatformTemplate(name="EGMP", models=["model-a", "model-b"],
                                        n_vehicles=args.vehicles)],
        )
    if args.labcell:
        paths = write_labcell(args.out, seed=scenario.seed)
    else:
        paths = write_fleet(scenario, args.out)
    print(json.dumps(paths, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="battaudit",
                                description="EV battery health audit from charging telemetry")
    p.add_argument("--version", action="version", version=f"battaudit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def _common(sp, out_default="out"):
        sp.add_argument("--data", required=True, help="directory with telemetry.csv and vehicles.csv")
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=out_default)
        sp.add_argument("--ridge-alpha", dest="ridge_alpha", type=float, default=None)
        sp.add_argument("--min-model-n", dest="min_model_n", type=int, default=None)
        sp.add_argument("--bootstrap-n", dest="bootstrap_n", type=int, default=None)

    _common(sub.add_parser("ingest", help="validate inputs and summarize the fleet"))
    _common(sub.add_parser("detect", help="flag + physics session detection and concordance"))
    _common(sub.add_parser("dq", help="window selection, dQ measurement, consistency"))
    _common(sub.add_parser("indicators", help="per-vehicle health indicators"))
    _common(sub.add_parser("wdf", help="usage-pattern models per platform"))
    _common(sub.add_parser("loso", help="cross-platform transfer validation"))
    _common(sub.add_parser("audit", help="full report bundle"))

    lab = sub.add_parser("labcell", help="lab-cell window sweep")
    lab.add_argument("--traces", required=True, help="per-cycle charge traces CSV")
    lab.add_argument("--rpt", required=True, help="cycle,rpt_ah reference capacities CSV")
    lab.add_argument("--config", default=None)
    lab.add_argument("--seed", type=int, default=None)
    lab.add_argument("--out", default="out")

    syn = sub.add_parser("synth", help="generate a synthetic fleet (or lab cell)")
    syn.add_argument("--scenario", default=None, help="scenario JSON")
    syn.add_argument("--manifest", default=None, help="corpus manifest to regenerate and verify")
    syn.add_argument("--seed", type=int, default=None)
    syn.add_argument("--vehicles", type=int, default=12)
    syn.add_argument("--days", type=int, default=3)
    syn.add_argument("--labcell", action="store_true")
    syn.add_argument("--out", default="synth-out")
    return p


HANDLERS = {
    "ingest": cmd_ingest,
    "detect": cmd_detect,
    "dq": cmd_dq,
    "indicators": cmd_indicators,
    "wdf": cmd_wdf,
    "loso": cmd_loso,
    "audit": cmd_audit,
    "labcell": cmd_labcell,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return HANDLERS[args.command](args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    except BattAuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
