"""The five per-vehicle health indicators.

kWh/%SOC, DCIR at 25 C, dQ (from the capacity module), thermal impedance,
and cell-voltage imbalance, plus the dQ/dV peak voltage marker and its
universal threshold classifier. Every indicator aggregates episodes or
sessions with a median, so single aberrant events cannot dominate. An
indicator that has no qualifying data is absent (None), never zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .config import RunConfig
from .sessions import CCSegment, _runs_with_gap
from .telemetry import VehicleSpec, VehicleStream

GAS_CONSTANT_J_MOL_K = 8.314
T_REF_K = 298.15  # 25 C reference for resistance standardization


@dataclass
class HealthIndicators:
    vehicle_id: str
    kwh_per_soc: float | None
    dcir_mohm_25c: float | None
    dq_ah: float | None
    thermal_z: float | None       # degC per A^2*s
    cell_v_std: float | None      # volts
    v_peak: float | None          # volts per cell
    vpeak_class: str | None       # "healthy" / "degraded"


# --------------------------------------------------------------------------
# driving energy efficiency
# --------------------------------------------------------------------------

def _driving_episodes(stream: VehicleStream, cfg: RunConfig) -> list[tuple[int, int]]:
    """Maximal runs of active discharge, split on time gaps."""
    active = (stream.chg_state == 0) & (np.abs(stream.pack_a) > cfg.drive_current_min_a)
    idx = np.nonzero(active)[0]
    return _runs_with_gap(idx, stream.t, cfg.session_gap_s)


def kwh_per_soc(stream: VehicleStream, config: RunConfig | None = None) -> float | None:
    """Median driving energy per SOC percent over qualifying episodes.

    Episode gates: |current| above the driving floor, duration > 5 min, SOC
    drop > 5 points. Energy is the trapezoidal integral of pack power.
    """
    cfg = config or RunConfig()
    values = []
    for a, b in _driving_episodes(stream, cfg):
        t = stream.t[a : b + 1]
        if t[-1] - t[0] <= cfg.drive_min_s:
            continue
        dsoc = stream.soc[a] - stream.soc[b]
        if dsoc <= cfg.drive_min_dsoc:
            continue
        p = stream.pack_v[a : b + 1] * stream.pack_a[a : b + 1]  # watts, discharge negative
        energy_wh = -np.trapezoid(p, t) / 3600.0
        if energy_wh <= 0:
            continue
        values.append(energy_wh / 1000.0 / dsoc)
    return float(np.median(values)) if values else None


# --------------------------------------------------------------------------
# DC internal resistance
# --------------------------------------------------------------------------

def arrhenius_factor(temp_c: float | np.ndarray, ea_j_mol: float = 20000.0):
    """Multiplier standardizing a resistance measured at temp_c to 25 C.

    R follows exp(Ea / (R_gas * T)), so a cold measurement reads high and is
    corrected downward: factor = exp((Ea/R_gas) * (1/T_ref - 1/T_meas)).
    The factor is exactly 1 at 25 C and increases with temperature.
    """
    t_k = np.asarray(temp_c, dtype=float) + 273.15
    return np.exp((ea_j_mol / GAS_CONSTANT_J_MOL_K) * (1.0 / T_REF_K - 1.0 / t_k))


def dcir(stream: VehicleStream, config: RunConfig | None = None) -> float | None:
    """Median DC internal resistance from driving current steps, in mOhm at 25 C."""
    cfg = config or RunConfig()
    t, cur, v = stream.t, stream.pack_a, stream.pack_v
    di = np.diff(cur)
    dt = np.diff(t)
    driving = (stream.chg_state[:-1] == 0) & (stream.chg_state[1:] == 0)
    steps = np.nonzero((np.abs(di) > cfg.dcir_step_min_a) & (dt < cfg.dcir_step_max_s) & driving)[0]
    if steps.size == 0:
        return None
    r_ohm = np.abs(np.diff(v)[steps] / di[steps])
    temp = 0.5 * (stream.temp_c[steps] + stream.temp_c[steps + 1])
    r25 = r_ohm * arrhenius_factor(temp, cfg.dcir_ea_j_mol)
    return float(np.median(r25) * 1000.0)


# --------------------------------------------------------------------------
# thermal impedance
# --------------------------------------------------------------------------

def thermal_impedance(stream: VehicleStream, config: RunConfig | None = None) -> float | None:
    """Median temperature rise per integrated I^2 dt over fast-charge sessions."""
    cfg = config or RunConfig()
    idx = np.nonzero(stream.pack_a > cfg.fast_current_min_a)[0]
    values = []
    for a, b in _runs_with_gap(idx, stream.t, cfg.session_gap_s):
        t = stream.t[a : b + 1]
        if t[-1] - t[0] < cfg.fast_min_s:
            continue
        i2 = np.trapezoid(stream.pack_a[a : b + 1] ** 2, t)
        if i2 <= 0:
            continue
        values.append((stream.temp_c[b] - stream.temp_c[a]) / i2)
    return float(np.median(values)) if values else None


# --------------------------------------------------------------------------
# cell imbalance
# --------------------------------------------------------------------------

def cell_v_std(stream: VehicleStream, config: RunConfig | None = None) -> float | None:
    """Median across-sample std of individual cell voltages under load."""
    cfg = config or RunConfig()
    if stream.cell_v is None:
        return None
    mask = np.abs(stream.pack_a) > cfg.cellstd_current_min_a
    mask &= ~np.isnan(stream.cell_v).any(axis=1)
    if not np.any(mask):
        return None
    stds = np.std(stream.cell_v[mask], axis=1)
    return float(np.median(stds))


# --------------------------------------------------------------------------
# differential-capacity peak voltage
# --------------------------------------------------------------------------

def _session_vpeak(
    stream: VehicleStream, seg: CCSegment, spec: VehicleSpec,
    step_v: float, cfg: RunConfig,
) -> float | None:
    t = stream.t[seg.start_idx : seg.end_idx + 1]
    v = stream.pack_v[seg.start_idx : seg.end_idx + 1]
    cur = stream.pack_a[seg.start_idx : seg.end_idx + 1]
    cc = spec.cell_count
    v_cell = v / cc
    lo_req, hi_req = 3.4, 4.2
    inside = (v_cell >= lo_req) & (v_cell <= hi_req)
    if not np.any(inside):
        return None
    span = v_cell[inside].max() - v_cell[inside].min()
    if span < cfg.vpeak_span_min_v:
        return None
    # charge accumulated per quantization-grid voltage bin: dQ/dV without
    # explicit differentiation, which would blow up on plateaus
    k = np.round(v / step_v).astype(int)
    dq_per_sample = np.zeros(len(t))
    dq_per_sample[:-1] = 0.5 * (cur[1:] + cur[:-1]) * np.diff(t) / 3600.0
    k_min, k_max = k.min(), k.max()
    charge = np.bincount(k - k_min, weights=dq_per_sample, minlength=k_max - k_min + 1)
    bin_v_cell = (np.arange(k_min, k_max + 1) * step_v) / cc
    # moving-average smoothing over a fixed number of grid bins
    m = cfg.vpeak_smooth_bins
    kernel = np.ones(m) / m
    smooth = np.convolve(charge, kernel, mode="same")
    search = (bin_v_cell >= cfg.vpeak_search_lo_v) & (bin_v_cell <= cfg.vpeak_search_hi_v)
    if not np.any(search) or smooth[search].max() <= 0:
        return None
    return float(bin_v_cell[search][np.argmax(smooth[search])])


def v_peak(
    stream: VehicleStream,
    segments: list[CCSegment],
    spec: VehicleSpec | None = None,
    step_mv: float | None = None,
    config: RunConfig | None = None,
) -> float | None:
    """Dominant dQ/dV peak voltage (V/cell): median over qualifying sessions.

    Depends only on the charge-vs-voltage shape, so it is invariant to time
    rescaling and to pack-vs-cell representation.
    """
    cfg = config or RunConfig()
    spec = spec or stream.spec
    step = step_mv if step_mv is not None else spec.quantization_step_mv
    if step is None or step <= 0:
        return None
    step_v = step / 1000.0
    peaks = [
        p for seg in segments
        if (p := _session_vpeak(stream, seg, spec, step_v, cfg)) is not None
    ]
    return float(np.median(peaks)) if peaks else None


def classify_vpeak(v_peak_value: float, threshold_v: float = 3.67) -> str:
    """Universal threshold classifier; a peak exactly at threshold is healthy."""
    return "degraded" if v_peak_value < threshold_v else "healthy"


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

def compute_indicators(
    stream: VehicleStream,
    segments: list[CCSegment],
    dq_ah: float | None = None,
    step_mv: float | None = None,
    config: RunConfig | None = None,
) -> HealthIndicators:
    cfg = config or RunConfig()
    vp = v_peak(stream, segments, stream.spec, step_mv, cfg)
    return HealthIndicators(
        vehicle_id=stream.spec.vehicle_id,
        kwh_per_soc=kwh_per_soc(stream, cfg),
        dcir_mohm_25c=dcir(stream, cfg),
        dq_ah=dq_ah,
        thermal_z=thermal_impedance(stream, cfg),
        cell_v_std=cell_v_std(stream, cfg),
        v_peak=vp,
        vpeak_class=classify_vpeak(vp, cfg.vpeak_threshold_v) if vp is not None else None,
    )


def indicators_to_dataframe(items: list[HealthIndicators]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "vehicle_id": h.vehicle_id,
                "kwh_per_soc": h.kwh_per_soc,
                "dcir_mohm_25c": h.dcir_mohm_25c,
                "dq_ah": h.dq_ah,
                "thermal_z": h.thermal_z,
                "cell_v_std": h.cell_v_std,
                "v_peak": h.v_peak,
                "vpeak_class": h.vpeak_class,
            }
            for h in items
        ],
        columns=["vehicle_id", "kwh_per_soc", "dcir_mohm_25c", "dq_ah",
                 "thermal_z", "cell_v_std", "v_peak", "vpeak_class"],
    )
