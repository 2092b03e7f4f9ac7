"""Machine-first report emission: canonical JSON plus derived CSV tables.

Reports carry the tool version, the configuration hash and every seed, and
never wall-clock timestamps, so identical inputs produce byte-identical
bundles.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_report(report: dict, path: str | Path) -> None:
    payload = {"tool": {"name": "battaudit", "version": __version__}}
    payload.update(jsonable(report))
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_tables(tables: dict, outdir: str | Path) -> list[str]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, df in sorted(tables.items()):
        p = outdir / f"{name}.csv"
        df.to_csv(p, index=False)
        written.append(str(p))
    return written
