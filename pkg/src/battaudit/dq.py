"""Partial-voltage-window charge (dQ) measurement and its validations.

The protocol: take slow constant-current charging segments, trim both ends,
gate on current stability and temperature, require the session to traverse a
quantization-aligned voltage window fully, and integrate current over the
traversal. Charge is the trapezoidal integral of current over timestamps;
the BMS SAC counter is a cross-check only, never the measurement.

Window crossing times are interpolated on the session's monotone voltage
envelope, so adjacent windows share their boundary time exactly and charge
is additive across them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .config import RunConfig
from .errors import InsufficientDataError
from .sessions import CCSegment, moving_median
from .stats import CorrelationResult, pearson, spearman
from .telemetry import VehicleSpec, VehicleStream


@dataclass(frozen=True)
class DQWindow:
    """A voltage window with quantization-aligned pack-level bounds."""

    v_lo: float          # volts per cell (nominal request)
    v_hi: float
    aligned_lo: float    # pack volts, integer multiple of the sensor step
    aligned_hi: float

    def width_cell(self, cell_count: int) -> float:
        return (self.aligned_hi - self.aligned_lo) / cell_count


def make_window(v_lo_cell: float, v_hi_cell: float, spec: VehicleSpec,
                step_mv: float | None = None) -> DQWindow:
    """Align a per-cell window request to the pack quantization grid.

    Bounds snap to the nearest grid multiple. The step comes from the spec
    unless given explicitly (e.g. from empirical detection).
    """
    if v_lo_cell >= v_hi_cell:
        raise ValueError("window requires v_lo < v_hi")
    step = (step_mv if step_mv is not None else spec.quantization_step_mv)
    if step is None or step <= 0:
        raise ValueError(f"{spec.vehicle_id}: no quantization step available")
    step_v = step / 1000.0
    lo = round(v_lo_cell * spec.cell_count / step_v) * step_v
    hi = round(v_hi_cell * spec.cell_count / step_v) * step_v
    if hi <= lo:
        hi = lo + step_v
    return DQWindow(v_lo=v_lo_cell, v_hi=v_hi_cell, aligned_lo=lo, aligned_hi=hi)


@dataclass
class DQMeasurement:
    vehicle_id: str
    window: DQWindow
    dq_ah: float
    n_sessions: int
    session_dq_cv: float      # sample CV (ddof=1) across qualifying sessions
    mean_temp_c: float
    quality: dict = field(default_factory=dict)


@dataclass
class ConsistencyReport:
    platform: str
    pair_cv_values: np.ndarray
    median_cv: float
    frac_below_5pct: float
    n_pairs: int
    n_vehicles: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "platform": self.platform,
            "median_cv": self.median_cv,
            "frac_below_5pct": self.frac_below_5pct,
            "n_pairs": self.n_pairs,
            "n_vehicles": self.n_vehicles,
            "seed": self.seed,
        }


# --------------------------------------------------------------------------
# single-session integration
# --------------------------------------------------------------------------

def _trimmed_slice(stream: VehicleStream, seg: CCSegment, trim_s: float):
    t = stream.t[seg.start_idx : seg.end_idx + 1]
    keep = (t >= t[0] + trim_s) & (t <= t[-1] - trim_s)
    idx = np.nonzero(keep)[0]
    if idx.size < 10:
        return None
    a = seg.start_idx + idx[0]
    b = seg.start_idx + idx[-1]
    return a, b


def _monotone_envelope(v: np.ndarray, t: np.ndarray, window_s: float) -> np.ndarray:
    return np.maximum.accumulate(moving_median(v, t, window_s))


def _crossing_time(v_env: np.ndarray, t: np.ndarray, level: float) -> float | None:
    """Time at which the non-decreasing envelope first reaches ``level``."""
    if v_env[0] > level or v_env[-1] < level:
        return None
    i = int(np.searchsorted(v_env, level, side="left"))
    if i == 0 or v_env[i] == level:
        # walk to the first sample at this plateau
        j = i
        while j > 0 and v_env[j - 1] == v_env[i]:
            j -= 1
        return float(t[j])
    frac = (level - v_env[i - 1]) / (v_env[i] - v_env[i - 1])
    return float(t[i - 1] + frac * (t[i] - t[i - 1]))


def session_window_dq(
    stream: VehicleStream,
    seg: CCSegment,
    window: DQWindow,
    config: RunConfig | None = None,
) -> dict | None:
    """Charge through one window on one session, with gate diagnostics.

    Returns None when the trimmed session fails a gate or does not span the
    aligned window; otherwise a dict with dq_ah, sac_delta_ah, sac_dev_frac,
    mean_temp_c. The caller decides what the SAC deviation means.
    """
    cfg = config or RunConfig()
    trimmed = _trimmed_slice(stream, seg, cfg.trim_s)
    if trimmed is None:
        return None
    a, b = trimmed
    t = stream.t[a : b + 1]
    cur = stream.pack_a[a : b + 1]
    mean_i = float(np.mean(cur))
    if mean_i <= 0 or np.std(cur) / mean_i >= cfg.current_cv_max:
        return None
    mean_temp = float(np.mean(stream.temp_c[a : b + 1]))
    if not (cfg.temp_lo_c <= mean_temp <= cfg.temp_hi_c):
        return None
    v_env = _monotone_envelope(stream.pack_v[a : b + 1], t, cfg.smooth_window_s)
    if not (v_env[0] <= window.aligned_lo and v_env[-1] >= window.aligned_hi):
        return None  # partial traversals are never extrapolated
    t_lo = _crossing_time(v_env, t, window.aligned_lo)
    t_hi = _crossing_time(v_env, t, window.aligned_hi)
    if t_lo is None or t_hi is None or t_hi <= t_lo:
        return None
    cum_q = np.concatenate([[0.0], np.cumsum(0.5 * (cur[1:] + cur[:-1]) * np.diff(t))]) / 3600.0
    q_lo = float(np.interp(t_lo, t, cum_q))
    q_hi = float(np.interp(t_hi, t, cum_q))
    dq = q_hi - q_lo
    if dq <= 0:
        return None
    sac = stream.sac_ah[a : b + 1]
    sac_delta = float(np.interp(t_hi, t, sac) - np.interp(t_lo, t, sac))
    sac_dev = abs(dq - sac_delta) / sac_delta if sac_delta > 0 else math.inf
    return {
        "dq_ah": dq,
        "sac_delta_ah": sac_delta,
        "sac_dev_frac": sac_dev,
        "mean_temp_c": mean_temp,
        "t_lo": t_lo,
        "t_hi": t_hi,
    }


def measure_dq(
    stream: VehicleStream,
    segments: list[CCSegment],
    window: DQWindow,
    config: RunConfig | None = None,
) -> DQMeasurement | None:
    """Per-vehicle dQ: median over qualifying sessions, or None when < 2 qualify.

    Sessions whose integral disagrees with the SAC counter by more than the
    configured fraction are flagged and excluded. Unavailability is distinct
    from zero: a vehicle with no qualifying sessions has no measurement.
    """
    cfg = config or RunConfig()
    dqs, temps = [], []
    n_sac_flagged = 0
    n_gated = 0
    for seg in segments:
        out = session_window_dq(stream, seg, window, cfg)
        if out is None:
            n_gated += 1
            continue
        if out["sac_dev_frac"] > cfg.sac_check_max_frac:
            n_sac_flagged += 1
            continue
        dqs.append(out["dq_ah"])
        temps.append(out["mean_temp_c"])
    if len(dqs) < cfg.min_sessions:
        return None
    dqs_arr = np.array(dqs)
    cv = float(np.std(dqs_arr, ddof=1) / np.mean(dqs_arr)) if len(dqs) > 1 else 0.0
    return DQMeasurement(
        vehicle_id=stream.spec.vehicle_id,
        window=window,
        dq_ah=float(np.median(dqs_arr)),
        n_sessions=len(dqs),
        session_dq_cv=cv,
        mean_temp_c=float(np.mean(temps)),
        quality={"n_sessions_gated": n_gated, "n_sac_flagged": n_sac_flagged},
    )


# --------------------------------------------------------------------------
# window auto-selection
# --------------------------------------------------------------------------

def _qualified_spans(stream: VehicleStream, segments: list[CCSegment],
                     cfg: RunConfig) -> list[tuple[float, float]]:
    """Trimmed voltage envelope spans of sessions passing the CV/temp gates."""
    spans = []
    for seg in segments:
        trimmed = _trimmed_slice(stream, seg, cfg.trim_s)
        if trimmed is None:
            continue
        a, b = trimmed
        t = stream.t[a : b + 1]
        cur = stream.pack_a[a : b + 1]
        mean_i = float(np.mean(cur))
        if mean_i <= 0 or np.std(cur) / mean_i >= cfg.current_cv_max:
            continue
        mean_temp = float(np.mean(stream.temp_c[a : b + 1]))
        if not (cfg.temp_lo_c <= mean_temp <= cfg.temp_hi_c):
            continue
        v_env = _monotone_envelope(stream.pack_v[a : b + 1], t, cfg.smooth_window_s)
        spans.append((float(v_env[0]), float(v_env[-1])))
    return spans


def auto_select_window(
    streams: dict[str, VehicleStream],
    segments_by_vehicle: dict[str, list[CCSegment]],
    spec: VehicleSpec,
    step_mv: float | None = None,
    config: RunConfig | None = None,
) -> DQWindow:
    """Pick the aligned window maximizing vehicles with >= min_sessions coverage.

    Candidates have grid-aligned bounds inside the preference band with width
    inside the rigorous band. Ties break toward wider, then lower, windows.
    """
    cfg = config or RunConfig()
    step = (step_mv if step_mv is not None else spec.quantization_step_mv)
    if step is None or step <= 0:
        raise InsufficientDataError(f"{spec.platform}: no quantization step for window selection")
    step_v = step / 1000.0
    cc = spec.cell_count

    spans = {
        vid: _qualified_spans(streams[vid], segs, cfg)
        for vid, segs in segments_by_vehicle.items()
        if vid in streams
    }
    spans = {vid: sp for vid, sp in spans.items() if sp}
    if not spans:
        raise InsufficientDataError(f"{spec.platform}: no gated sessions for window selection")

    k_lo = math.ceil(cfg.window_band_lo_v * cc / step_v - 1e-9)
    k_hi = math.floor(cfg.window_band_hi_v * cc / step_v + 1e-9)
    w_min = cfg.window_width_lo_v * cc
    w_max = cfg.window_width_hi_v * cc
    candidates = []
    for ka in range(k_lo, k_hi + 1):
        lo = ka * step_v
        kb_min = ka + math.ceil(w_min / step_v - 1e-9)
        kb_max = min(k_hi, ka + math.floor(w_max / step_v + 1e-9))
        for kb in range(kb_min, kb_max + 1):
            candidates.append((lo, kb * step_v))
    if not candidates:
        raise InsufficientDataError(f"{spec.platform}: quantization too coarse for the window band")

    cand = np.array(candidates)
    coverage = np.zeros(len(cand), dtype=int)
    for sp in spans.values():
        arr = np.array(sp)  # (m, 2) of (vmin, vmax)
        ok = (arr[:, 0][None, :] <= cand[:, 0][:, None]) & (arr[:, 1][None, :] >= cand[:, 1][:, None])
        coverage += ok.sum(axis=1) >= cfg.min_sessions
    best = max(
        range(len(cand)),
        key=lambda i: (coverage[i], cand[i, 1] - cand[i, 0], -cand[i, 0]),
    )
    if coverage[best] < 1:
        raise InsufficientDataError(f"{spec.platform}: no candidate window covers any vehicle")
    lo, hi = cand[best]
    return DQWindow(v_lo=lo / cc, v_hi=hi / cc, aligned_lo=float(lo), aligned_hi=float(hi))


# --------------------------------------------------------------------------
# normalization and consistency
# --------------------------------------------------------------------------

def relative_capacity(dq_values: dict[str, float], p90_pct: float = 90.0) -> dict[str, float]:
    """Express each vehicle's dQ as percent of the within-platform P90.

    The percentile uses linear interpolation between order statistics, so
    roughly a tenth of the fleet lands above 100% by construction.
    """
    if len(dq_values) < 2:
        raise InsufficientDataError("relative_capacity requires >= 2 vehicles")
    vals = np.array(list(dq_values.values()), dtype=float)
    p90 = np.percentile(vals, p90_pct)
    return {vid: float(dq / p90 * 100.0) for vid, dq in dq_values.items()}


def multiwindow_consistency(
    dq_table: dict[str, dict[int, float]],
    platform: str = "",
    config: RunConfig | None = None,
) -> ConsistencyReport | None:
    """Pairwise dQ-ratio CV across shared voltage windows.

    ``dq_table`` maps vehicle -> {window index -> dq}. Pairs sharing at
    least ``consistency_min_common`` windows contribute the sample CV of
    their per-window ratios; sampling is capped and seeded for
    reproducibility. Returns None when fewer than two vehicles qualify.
    """
    cfg = config or RunConfig()
    vids = sorted(v for v, wins in dq_table.items() if len(wins) >= cfg.consistency_min_common)
    if len(vids) < 2:
        return None
    pairs = [(i, j) for i in range(len(vids)) for j in range(i + 1, len(vids))]
    rng = np.random.default_rng(cfg.consistency_seed)
    if len(pairs) > cfg.consistency_max_pairs:
        pick = rng.choice(len(pairs), size=cfg.consistency_max_pairs, replace=False)
        pairs = [pairs[k] for k in sorted(pick)]
    cvs = []
    for i, j in pairs:
        wi, wj = dq_table[vids[i]], dq_table[vids[j]]
        common = sorted(set(wi) & set(wj))
        if len(common) < cfg.consistency_min_common:
            continue
        ratios = np.array([wi[w] / wj[w] for w in common])
        cvs.append(float(np.std(ratios, ddof=1) / np.mean(ratios)))
    if not cvs:
        return None
    cvs_arr = np.array(cvs)
    return ConsistencyReport(
        platform=platform,
        pair_cv_values=cvs_arr,
        median_cv=float(np.median(cvs_arr)),
        frac_below_5pct=float(np.mean(cvs_arr < 0.05)),
        n_pairs=len(cvs),
        n_vehicles=len(vids),
        seed=cfg.consistency_seed,
    )


def ground_truth_compare(
    narrow: dict[str, float], wide: dict[str, float], min_vehicles: int = 5
) -> dict:
    """Agreement between narrow-window and wide-window dQ rankings.

    Spearman rho on the raw values plus Pearson r on log-transformed dQ,
    over vehicles present in both tables.
    """
    common = sorted(set(narrow) & set(wide))
    if len(common) < min_vehicles:
        raise InsufficientDataError(
            f"ground_truth_compare requires >= {min_vehicles} vehicles with both "
            f"windows, got {len(common)}"
        )
    a = np.array([narrow[v] for v in common])
    b = np.array([wide[v] for v in common])
    rank = spearman(a, b)
    logr = pearson(np.log(a), np.log(b))
    return {
        "n": len(common),
        "spearman_rho": rank.rho,
        "p": rank.p,
        "pearson_r_log": logr.rho,
        "vehicles": common,
    }


# --------------------------------------------------------------------------
# laboratory cell window sweep
# --------------------------------------------------------------------------

def default_labcell_windows() -> list[tuple[float, float]]:
    """The 60-window grid for the lab sweep.

    Lower bounds 2.5..3.5 V and upper bounds up to 4.2 V on a 0.1 V grid,
    keeping spans of at least 0.7 V so every window accumulates meaningful
    charge; exactly 60 combinations.
    """
    lows = np.round(np.arange(2.5, 3.51, 0.1), 2)
    highs = np.round(np.arange(3.5, 4.21, 0.1), 2)
    return [(float(lo), float(hi)) for lo in lows for hi in highs if hi - lo >= 0.7 - 1e-9]


def _prepare_cycle(t, v, i, min_current_a: float = 0.1):
    """Longest current-detected charging run: (t, envelope, cumulative Ah)."""
    charging = i > min_current_a
    if not np.any(charging):
        return None
    idx = np.nonzero(charging)[0]
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    runs = [(idx[a], idx[b]) for a, b in zip(starts, ends)]
    a, b = max(runs, key=lambda r: r[1] - r[0])
    tt, vv, ii = t[a : b + 1], v[a : b + 1], i[a : b + 1]
    v_env = np.maximum.accumulate(vv)
    cum_q = np.concatenate([[0.0], np.cumsum(0.5 * (ii[1:] + ii[:-1]) * np.diff(tt))]) / 3600.0
    return tt, v_env, cum_q


def _cycle_window_dq(prepared, lo: float, hi: float):
    """Charge through [lo, hi] on a prepared lab cycle."""
    if prepared is None:
        return None
    tt, v_env, cum_q = prepared
    if not (v_env[0] <= lo and v_env[-1] >= hi):
        return None
    t_lo = _crossing_time(v_env, tt, lo)
    t_hi = _crossing_time(v_env, tt, hi)
    if t_lo is None or t_hi is None or t_hi <= t_lo:
        return None
    return float(np.interp(t_hi, tt, cum_q) - np.interp(t_lo, tt, cum_q))


def labcell_window_sweep(
    cycles: list[pd.DataFrame],
    rpt_ah: np.ndarray,
    windows: list[tuple[float, float]] | None = None,
    min_cycles: int = 20,
) -> pd.DataFrame:
    """Grid of (window, Spearman rho, ratio MAE) over per-cycle charge traces.

    Each cycle DataFrame has columns ``timestamp, voltage, current``. For
    each window, dQ per cycle is measured on the current-detected charging
    segment; rho correlates dQ with RPT capacity and MAE compares the
    inter-cycle dQ ratio (relative to the first usable cycle) against the
    RPT capacity ratio. Cycles that never traverse a window are omitted for
    that window and counted.
    """
    if len(cycles) < min_cycles:
        raise InsufficientDataError(f"labcell sweep requires >= {min_cycles} cycles")
    if len(cycles) != len(rpt_ah):
        raise ValueError("one RPT capacity per cycle required")
    windows = windows if windows is not None else default_labcell_windows()
    rpt = np.asarray(rpt_ah, dtype=float)
    rows = []
    prepared = [
        _prepare_cycle(c["timestamp"].to_numpy(float), c["voltage"].to_numpy(float),
                       c["current"].to_numpy(float))
        for c in cycles
    ]
    for lo, hi in windows:
        dq = np.array([
            out if (out := _cycle_window_dq(p, lo, hi)) is not None else np.nan
            for p in prepared
        ])
        ok = np.isfinite(dq)
        n_used = int(ok.sum())
        if n_used < 3:
            rows.append({"window_lo": lo, "window_hi": hi, "rho": None, "p": None,
                         "mae": None, "n_cycles": n_used,
                         "n_omitted": len(cycles) - n_used})
            continue
        res = spearman(dq[ok], rpt[ok]) if n_used >= 4 else CorrelationResult(None, None, n_used)
        ref = int(np.nonzero(ok)[0][0])
        mae = float(np.mean(np.abs(dq[ok] / dq[ref] - rpt[ok] / rpt[ref])))
        rows.append({
            "window_lo": lo, "window_hi": hi,
            "rho": res.rho, "p": res.p, "mae": mae,
            "n_cycles": n_used, "n_omitted": len(cycles) - n_used,
        })
    return pd.DataFrame(rows)


def dq_to_dataframe(measurements: list[DQMeasurement], rel: dict[str, float] | None = None) -> pd.DataFrame:
    """dQ export table, one row per vehicle."""
    rel = rel or {}
    return pd.DataFrame(
        [
            {
                "vehicle_id": m.vehicle_id,
                "window_lo": m.window.aligned_lo,
                "window_hi": m.window.aligned_hi,
                "dq_ah": m.dq_ah,
                "n_sessions": m.n_sessions,
                "rel_capacity_pct": rel.get(m.vehicle_id),
            }
            for m in measurements
        ],
        columns=["vehicle_id", "window_lo", "window_hi", "dq_ah", "n_sessions", "rel_capacity_pct"],
    )
