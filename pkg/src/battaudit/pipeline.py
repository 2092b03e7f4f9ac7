"""Audit orchestration: ingestion through the full report bundle.

Stages are pure functions over in-memory streams; the CLI handles files.
Every analysis echoes its inputs (seeds, thresholds, exclusions) so two runs
with the same data and configuration produce identical bundles.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import dq as dqmod
from . import indicators as ind
from . import profiles as prof
from . import sessions as sess
from . import stats, wdf
from .config import RunConfig
from .errors import InsufficientDataError
from .telemetry import VehicleSpec, VehicleStream, detect_quantization


@dataclass
class PlatformData:
    """Everything computed for one platform subgroup."""

    name: str
    vehicle_ids: list
    step_mv: float | None = None
    flag_segments: dict = field(default_factory=dict)
    physics_segments: dict = field(default_factory=dict)
    concordance: sess.ConcordanceReport | None = None
    window: dqmod.DQWindow | None = None
    dq: dict = field(default_factory=dict)            # vehicle -> DQMeasurement
    dq_relaxed: dict = field(default_factory=dict)    # unfiltered protocol
    rel_capacity: dict = field(default_factory=dict)
    consistency: dqmod.ConsistencyReport | None = None
    ground_truth_cmp: dict | None = None
    indicators: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict)


def _relaxed(cfg: RunConfig) -> RunConfig:
    """Unfiltered dQ protocol: same windows, gates off, single session allowed."""
    r = dataclasses.replace(cfg)
    r.current_cv_max = 10.0
    r.temp_lo_c = -1000.0
    r.temp_hi_c = 1000.0
    r.min_sessions = 1
    return r


def platform_step_mv(streams: list[VehicleStream], cfg: RunConfig) -> float | None:
    """Spec-declared step if present, else empirical detection (median of vehicles)."""
    declared = [s.spec.quantization_step_mv for s in streams if s.spec.quantization_step_mv]
    if declared:
        return float(np.median(declared))
    detected = []
    for s in streams:
        try:
            detected.append(detect_quantization(s, rel_tol=cfg.quant_rel_tol))
        except InsufficientDataError:
            continue
    return float(np.median(detected)) if detected else None


def analyze_platform(
    name: str,
    streams: dict[str, VehicleStream],
    cfg: RunConfig,
) -> PlatformData:
    data = PlatformData(name=name, vehicle_ids=sorted(streams))
    members = [streams[v] for v in data.vehicle_ids]
    data.step_mv = platform_step_mv(members, cfg)
    step_v = data.step_mv / 1000.0 if data.step_mv else None

    for vid in data.vehicle_ids:
        s = streams[vid]
        data.flag_segments[vid] = sess.detect_flag_sessions(s, cfg)
        data.physics_segments[vid] = sess.detect_physics_sessions(s, cfg, quant_step_v=step_v)
    all_flag = [g for vid in data.vehicle_ids for g in data.flag_segments[vid]]
    all_phys = [g for vid in data.vehicle_ids for g in data.physics_segments[vid]]
    data.concordance = sess.concordance(all_flag, all_phys, cfg)

    spec0 = members[0].spec
    try:
        data.window = dqmod.auto_select_window(
            streams, data.flag_segments, spec0, step_mv=data.step_mv, config=cfg
        )
    except InsufficientDataError:
        data.window = None

    relaxed_cfg = _relaxed(cfg)
    if data.window is not None:
        for vid in data.vehicle_ids:
            m = dqmod.measure_dq(streams[vid], data.flag_segments[vid], data.window, cfg)
            if m is not None:
                data.dq[vid] = m
            mr = dqmod.measure_dq(streams[vid], data.flag_segments[vid], data.window, relaxed_cfg)
            if mr is not None:
                data.dq_relaxed[vid] = mr
        if len(data.dq) >= 2:
            data.rel_capacity = dqmod.relative_capacity(
                {v: m.dq_ah for v, m in data.dq.items()}, cfg.p90_pct
            )

    if data.step_mv:
        table: dict[str, dict[int, float]] = {}
        for vid in data.vehicle_ids:
            per_window = {}
            for w_idx, (lo, hi) in enumerate(cfg.consistency_windows):
                win = dqmod.make_window(lo, hi, streams[vid].spec, data.step_mv)
                m = dqmod.measure_dq(streams[vid], data.flag_segments[vid], win, cfg)
                if m is not None:
                    per_window[w_idx] = m.dq_ah
            if per_window:
                table[vid] = per_window
        data.consistency = dqmod.multiwindow_consistency(table, platform=name, config=cfg)

        narrow, wide = {}, {}
        for vid in data.vehicle_ids:
            wn = dqmod.make_window(*cfg.gt_narrow_window, streams[vid].spec, data.step_mv)
            ww = dqmod.make_window(*cfg.gt_wide_window, streams[vid].spec, data.step_mv)
            mn = dqmod.measure_dq(streams[vid], data.flag_segments[vid], wn, cfg)
            mw = dqmod.measure_dq(streams[vid], data.flag_segments[vid], ww, cfg)
            if mn is not None:
                narrow[vid] = mn.dq_ah
            if mw is not None:
                wide[vid] = mw.dq_ah
        try:
            data.ground_truth_cmp = dqmod.ground_truth_compare(narrow, wide, cfg.gt_min_vehicles)
        except InsufficientDataError as exc:
            data.ground_truth_cmp = {"unavailable": str(exc)}

    for vid in data.vehicle_ids:
        s = streams[vid]
        slow = [g for g in data.flag_segments[vid]
                if cfg.cc_current_lo_a <= g.mean_current_a <= cfg.cc_current_hi_a]
        m = data.dq.get(vid)
        data.indicators[vid] = ind.compute_indicators(
            s, slow, dq_ah=m.dq_ah if m else None, step_mv=data.step_mv, config=cfg
        )
        data.profiles[vid] = prof.extract_profile(s, s.spec, cfg)
    return data


# --------------------------------------------------------------------------
# platform-level statistics
# --------------------------------------------------------------------------

def _high_soc_frac(p: prof.UsageProfile, edge: float) -> float:
    first = int(edge // 10)
    return float(np.sum(p.soc_bins[first:]))


def platform_statistics(data: PlatformData, specs: dict[str, VehicleSpec],
                        cfg: RunConfig) -> dict:
    """Quartile gaps, SOH correlations (dual protocol), and dose-response."""
    out: dict = {"platform": data.name, "n_vehicles": len(data.vehicle_ids)}
    vids_dq = sorted(data.dq)
    out["n_dq"] = len(vids_dq)
    if len(vids_dq) >= 2:
        dq_vals = np.array([data.dq[v].dq_ah for v in vids_dq])
        out["dq_cv"] = float(np.std(dq_vals, ddof=1) / np.mean(dq_vals))
        out["intra_vehicle_cv_median"] = float(
            np.median([data.dq[v].session_dq_cv for v in vids_dq])
        )

    # usage-stratified Q4-Q1 gap in dQ, stratifier = high-SOC dwell fraction
    strat = {v: _high_soc_frac(data.profiles[v], cfg.high_soc_edge) for v in vids_dq}
    if len(vids_dq) >= cfg.quartile_min_n:
        health = np.array([data.dq[v].dq_ah for v in vids_dq])
        expo = np.array([strat[v] for v in vids_dq])
        out["dq_quartile_gap"] = stats.quartile_gap(
            health, expo, metric="dq_ah", min_n=cfg.quartile_min_n
        ).to_dict()
        if len(vids_dq) >= 10:
            mileage = np.array([data.profiles[v].total_mileage_km for v in vids_dq])
            out["partial_rho_highsoc_dq_given_mileage"] = stats.partial_spearman(
                expo, health, mileage
            )
        soh_vids = [v for v in vids_dq if specs[v].bms_soh is not None]
        if len(soh_vids) >= cfg.quartile_min_n:
            soh = np.array([specs[v].bms_soh for v in soh_vids])
            expo_s = np.array([strat[v] for v in soh_vids])
            out["soh_quartile_gap"] = stats.quartile_gap(
                soh, expo_s, metric="bms_soh", as_points=True, min_n=cfg.quartile_min_n
            ).to_dict()

    out["soh_correlation"] = _soh_correlations(data, specs, cfg)

    prof_vids = [v for v in data.vehicle_ids
                 if data.indicators[v].kwh_per_soc is not None]
    if len(prof_vids) >= cfg.dose_min_vehicles:
        soc_bins = np.array([data.profiles[v].soc_bins for v in prof_vids])
        health = np.array([data.indicators[v].kwh_per_soc for v in prof_vids])
        mileage = np.array([data.profiles[v].total_mileage_km for v in prof_vids])
        out["dose_response"] = stats.dose_response(
            soc_bins, health, mileage,
            high_soc_edge=cfg.high_soc_edge,
            min_vehicles=cfg.dose_min_vehicles,
            min_band_n=cfg.dose_min_band_n,
        ).to_dict()
    return out


def _soh_correlations(data: PlatformData, specs: dict[str, VehicleSpec],
                      cfg: RunConfig) -> dict:
    """dQ vs BMS SOH under the strict protocol and the relaxed one."""
    out: dict = {"available": False}

    def _corr(dq_map, label):
        vids = sorted(v for v in dq_map if specs[v].bms_soh is not None)
        if len(vids) < 4:
            return {"n": len(vids), "rho": None, "p": None, "note": "too few vehicles"}
        x = np.array([dq_map[v].dq_ah for v in vids])
        y = np.array([specs[v].bms_soh for v in vids])
        res = stats.spearman(x, y)
        entry = {"n": len(vids), "rho": res.rho, "p": res.p,
                 "power_to_detect_rho_05": stats.posthoc_power(0.5, len(vids), cfg.alpha)}
        if res.rho is not None and len(vids) > 3:
            if label == "cc_filtered":
                half = 1.959963984540054 / np.sqrt(len(vids) - 3)
                z = np.arctanh(np.clip(res.rho, -0.999999, 0.999999))
                entry["ci95"] = [float(np.tanh(z - half)), float(np.tanh(z + half))]
                entry["ci_method"] = "fisher-z analytic"
            elif len(vids) >= 8:
                ci = stats.bootstrap_ci(
                    stats.spearman_rho, (x, y),
                    n_boot=cfg.bootstrap_n, seed=cfg.seed,
                )
                entry["ci95"] = [ci.lo, ci.hi]
                entry["ci_method"] = f"bootstrap n={cfg.bootstrap_n} seed={cfg.seed}"
        return entry

    any_soh = any(specs[v].bms_soh is not None for v in data.vehicle_ids)
    if not any_soh:
        out["note"] = "platform does not expose BMS SOH"
        return out
    out["available"] = True
    out["cc_filtered"] = _corr(data.dq, "cc_filtered")
    out["unfiltered"] = _corr(data.dq_relaxed, "unfiltered")
    return out


# --------------------------------------------------------------------------
# model stage
# --------------------------------------------------------------------------

def model_analyses(platform_data: dict[str, PlatformData],
                   specs: dict[str, VehicleSpec], cfg: RunConfig) -> dict:
    """WDF stack per platform plus cross-platform transfer."""
    out: dict = {"per_platform": {}, "loso": {}}
    rows_x, rows_y, rows_platform = [], [], []

    for name, data in sorted(platform_data.items()):
        vids = [v for v in data.vehicle_ids if data.indicators[v].kwh_per_soc is not None]
        if len(vids) < cfg.min_model_n:
            out["per_platform"][name] = {"note": f"only {len(vids)} vehicles with target"}
            continue
        x = np.array([data.profiles[v].feature_vector() for v in vids])
        y = np.array([data.indicators[v].kwh_per_soc for v in vids])
        models = np.array([specs[v].model for v in vids])
        mileage = np.array([data.profiles[v].total_mileage_km for v in vids])
        entry: dict = {"n": len(vids)}
        res = wdf.pooled_loocv(x, y, models, cfg.min_model_n, cfg.pca_components, cfg.ridge_alpha)
        entry["wdf"] = res.to_dict()
        entry["hierarchical"] = wdf.hierarchical_r2(
            x, mileage, y, models, cfg.min_model_n, cfg.pca_components, cfg.ridge_alpha
        )
        vp_vids = [v for v in vids if data.indicators[v].v_peak is not None]
        if len(vp_vids) >= cfg.min_model_n:
            xi = np.array([data.profiles[v].feature_vector() for v in vp_vids])
            yi = np.array([data.indicators[v].kwh_per_soc for v in vp_vids])
            vp = np.array([data.indicators[v].v_peak for v in vp_vids])
            mi = np.array([specs[v].model for v in vp_vids])
            entry["augmented"] = wdf.augmented_wdf(
                xi, vp, yi, mi, cfg.min_model_n, cfg.pca_components, cfg.ridge_alpha
            )
            entry["vpeak_pooled_rho"] = wdf.fisher_pooled_rho(
                vp, yi, mi, cfg.fisher_min_n
            ).to_dict()
        entry["sensitivity_min_model_n"] = {
            str(m): wdf.pooled_loocv(x, y, models, m, cfg.pca_components, cfg.ridge_alpha).to_dict()
            for m in cfg.min_model_n_grid
        }
        out["per_platform"][name] = entry
        rows_x.append(x)
        rows_y.append(y)
        rows_platform.extend([name] * len(vids))

    if len({p for p in rows_platform}) >= 2:
        x_all = np.vstack(rows_x)
        y_all = np.concatenate(rows_y)
        plats = np.array(rows_platform)
        out["loso"]["bins"] = wdf.normalized_loso(
            x_all, y_all, plats, cfg.pca_components, cfg.ridge_alpha,
            normalize=True, min_test_n=cfg.loso_min_test_n,
        )
    else:
        out["loso"]["note"] = "needs >= 2 platforms with modelable vehicles"
    return out


# --------------------------------------------------------------------------
# fleet-level audit
# --------------------------------------------------------------------------

def run_audit(streams: dict[str, VehicleStream], specs: dict[str, VehicleSpec],
              cfg: RunConfig) -> dict:
    """The full report: per-platform analyses, models, warranty audit."""
    by_platform: dict[str, dict[str, VehicleStream]] = {}
    for vid, s in streams.items():
        by_platform.setdefault(s.spec.platform, {})[vid] = s

    platform_data = {
        name: analyze_platform(name, members, cfg)
        for name, members in sorted(by_platform.items())
    }
    report: dict = {"platforms": {}, "config": cfg.to_dict(), "config_hash": cfg.hash()}
    p_values = []
    for name, data in platform_data.items():
        entry = platform_statistics(data, specs, cfg)
        entry["concordance"] = data.concordance.to_dict() if data.concordance else None
        entry["quant_step_mv"] = data.step_mv
        if data.window:
            entry["window"] = {
                "v_lo_cell": data.window.aligned_lo / specs[data.vehicle_ids[0]].cell_count,
                "v_hi_cell": data.window.aligned_hi / specs[data.vehicle_ids[0]].cell_count,
                "aligned_lo": data.window.aligned_lo,
                "aligned_hi": data.window.aligned_hi,
            }
        entry["consistency"] = data.consistency.to_dict() if data.consistency else None
        entry["ground_truth"] = data.ground_truth_cmp
        report["platforms"][name] = entry
        cc = entry.get("soh_correlation", {}).get("cc_filtered", {})
        if cc.get("p") is not None:
            p_values.append((name, cc["p"]))

    if p_values:
        bonf = stats.bonferroni([p for _, p in p_values], alpha=cfg.alpha)
        report["bonferroni_soh_tests"] = {
            "platforms": [n for n, _ in p_values],
            **bonf,
        }

    report["models"] = model_analyses(platform_data, specs, cfg)

    soh_vids = sorted(
        v for name, data in platform_data.items() for v in data.rel_capacity
        if specs[v].bms_soh is not None
    )
    if len(soh_vids) >= cfg.warranty_min_n:
        rel_all = {}
        for data in platform_data.values():
            rel_all.update(data.rel_capacity)
        soh = np.array([specs[v].bms_soh for v in soh_vids])
        rel = np.array([rel_all[v] for v in soh_vids])
        report["warranty"] = stats.warranty_audit(
            soh, rel, healthy_soh=95.0, min_n=cfg.warranty_min_n
        ).to_dict()
    else:
        report["warranty"] = {"note": f"needs >= {cfg.warranty_min_n} vehicles with SOH and dQ"}

    report["_platform_data"] = platform_data  # dropped before serialization
    return report


def export_tables(report: dict) -> dict[str, pd.DataFrame]:
    """Derive the CSV tables from an audit report."""
    platform_data: dict[str, PlatformData] = report["_platform_data"]
    segments, dq_rows, ind_rows, prof_rows = [], [], [], []
    for name, data in sorted(platform_data.items()):
        for vid in data.vehicle_ids:
            segments.append(sess.segments_to_dataframe(
                data.flag_segments[vid] + data.physics_segments[vid]))
        dq_rows.append(dqmod.dq_to_dataframe(
            [data.dq[v] for v in sorted(data.dq)], data.rel_capacity))
        ind_rows.append(ind.indicators_to_dataframe(
            [data.indicators[v] for v in data.vehicle_ids]))
        prof_rows.append(prof.profiles_to_dataframe(
            [data.profiles[v] for v in data.vehicle_ids]))
    summary = []
    for name, entry in sorted(report["platforms"].items()):
        gap = entry.get("dq_quartile_gap", {})
        soh_gap = entry.get("soh_quartile_gap", {})
        cc = entry.get("soh_correlation", {}).get("cc_filtered", {})
        summary.append({
            "platform": name,
            "n_vehicles": entry.get("n_vehicles"),
            "n_dq": entry.get("n_dq"),
            "dq_cv_pct": 100 * entry["dq_cv"] if entry.get("dq_cv") is not None else None,
            "q4_q1_gap_pct": gap.get("gap"),
            "gap_p": gap.get("p_value"),
            "soh_gap_points": soh_gap.get("gap"),
            "soh_gap_p": soh_gap.get("p_value"),
            "rho_dq_soh": cc.get("rho"),
            "median_pair_cv_pct": 100 * entry["consistency"]["median_cv"]
            if entry.get("consistency") else None,
        })
    return {
        "segments": pd.concat(segments, ignore_index=True) if segments else pd.DataFrame(),
        "dq": pd.concat(dq_rows, ignore_index=True) if dq_rows else pd.DataFrame(),
        "indicators": pd.concat(ind_rows, ignore_index=True) if ind_rows else pd.DataFrame(),
        "profiles": pd.concat(prof_rows, ignore_index=True) if prof_rows else pd.DataFrame(),
        "platform_summary": pd.DataFrame(summary),
    }
