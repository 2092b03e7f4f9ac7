"""Run configuration: every protocol constant, with defaults and overrides.

All thresholds live here so reports can echo the effective configuration
and so any constant can be overridden from a key=value config file or a
CLI flag. The defaults are the audit protocol's reference values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    # -- ingestion ----------------------------------------------------------
    max_inversion_frac: float = 1e-3     # tolerated fraction of out-of-order adjacent timestamps
    quant_rel_tol: float = 1e-3          # relative tolerance when clustering voltage increments

    # -- session detection --------------------------------------------------
    cc_current_lo_a: float = 3.0         # slow constant-current band (AC charging)
    cc_current_hi_a: float = 50.0        # above this is DC fast charging
    min_session_s: float = 300.0
    session_gap_s: float = 60.0          # sample gap that does not split a session
    persist_fail_s: float = 30.0         # a criterion must fail this long to close a segment
    smooth_window_s: float = 30.0        # moving-median window for monotonicity checks
    overlap_match_frac: float = 0.5      # interval match: overlap >= this fraction of the shorter

    # -- dQ protocol --------------------------------------------------------
    trim_s: float = 180.0                # edge trim at both ends of a session
    current_cv_max: float = 0.25
    temp_lo_c: float = 10.0
    temp_hi_c: float = 35.0
    min_sessions: int = 2
    sac_check_max_frac: float = 0.10     # |integral - delta SAC| / delta SAC gate
    window_width_lo_v: float = 0.08      # rigorous window width band, V/cell
    window_width_hi_v: float = 0.12
    window_band_lo_v: float = 3.60       # auto-selection preference band, V/cell
    window_band_hi_v: float = 3.72
    p90_pct: float = 90.0                # relative-capacity reference percentile
    consistency_windows: tuple = ((3.50, 3.60), (3.60, 3.70), (3.70, 3.80), (3.80, 3.90))
    consistency_min_common: int = 3
    consistency_max_pairs: int = 2000
    consistency_seed: int = 20240901     # fixed default; echoed in the report
    gt_narrow_window: tuple = (3.60, 3.70)   # V/cell, fixed-range ranking window
    gt_wide_window: tuple = (3.50, 3.75)     # >= 0.25 V/cell, in-field capacity-test analogue
    gt_min_vehicles: int = 5

    # -- health indicators --------------------------------------------------
    drive_current_min_a: float = 5.0
    drive_min_s: float = 300.0
    drive_min_dsoc: float = 5.0
    dcir_step_min_a: float = 30.0
    dcir_step_max_s: float = 5.0
    dcir_ea_j_mol: float = 20000.0
    fast_current_min_a: float = 50.0
    fast_min_s: float = 600.0
    cellstd_current_min_a: float = 10.0
    vpeak_span_min_v: float = 0.3        # required session span inside [3.4, 4.2] V/cell
    vpeak_search_lo_v: float = 3.5
    vpeak_search_hi_v: float = 4.15
    vpeak_smooth_bins: int = 5
    vpeak_threshold_v: float = 3.67      # ties classify healthy

    # -- usage profiles -----------------------------------------------------
    crate_edges: tuple = (0.1, 0.3, 0.7, 1.5)   # C; bins: idle, gentle, normal, fast, high-rate DC
    profile_gap_cap_s: float = 120.0     # per-sample time weight cap

    # -- models -------------------------------------------------------------
    ridge_alpha: float = 1.0
    pca_components: int = 5
    min_model_n: int = 7
    min_model_n_grid: tuple = (7, 10, 15, 20)
    loso_min_test_n: int = 5
    fisher_min_n: int = 4

    # -- statistics ---------------------------------------------------------
    bootstrap_n: int = 1000
    alpha: float = 0.05
    quartile_min_n: int = 12
    dose_min_vehicles: int = 20
    dose_min_band_n: int = 6
    warranty_min_n: int = 20
    high_soc_edge: float = 80.0          # "high SOC" dwell = time fraction at or above this

    # -- run ----------------------------------------------------------------
    seed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = _tuple_to_list(v)
        return d

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _tuple_to_list(v):
    return [_tuple_to_list(x) if isinstance(x, tuple) else x for x in v]


def _coerce(name: str, raw: str, like) -> object:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(like, int) and not isinstance(like, bool):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            val = json.loads(raw)
            return _as_tuple(val)
        return raw
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from exc


def _as_tuple(v):
    if isinstance(v, list):
        return tuple(_as_tuple(x) for x in v)
    return v


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional key=value file, and overrides.

    File syntax: one ``key = value`` per line, ``#`` comments. Tuple-valued
    keys take JSON lists. Unknown keys are an error, not a warning.
    """
    cfg = RunConfig()
    fields = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw, fields[key]))
    for key, val in (overrides or {}).items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        if val is not None:
            setattr(cfg, key, val)
    return cfg
