"""Charging-session segmentation: BMS flag runs vs a physics-only state machine.

The physics detector proposes candidate segments from the current band and
closes them when a criterion fails persistently; every candidate is then
accepted or dropped by an independent verifier (`verify_physics_segment`)
that re-checks all four criteria, so an accepted segment always survives an
external re-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .config import RunConfig
from .telemetry import VehicleStream


@dataclass
class CCSegment:
    """A validated constant-current charging segment."""

    vehicle_id: str
    source: str  # "flag" or "physics"
    start_idx: int
    end_idx: int  # inclusive
    t_start: float
    t_end: float
    duration_s: float
    mean_current_a: float
    current_cv: float
    v_start: float
    v_end: float
    mean_temp_c: float
    sac_delta_ah: float

    def overlap_s(self, other: "CCSegment") -> float:
        return max(0.0, min(self.t_end, other.t_end) - max(self.t_start, other.t_start))


@dataclass
class ConcordanceReport:
    precision: float | None
    recall: float | None
    matched_physics: int
    matched_flag: int
    flag_only: int
    physics_only: int
    physics_total: int
    flag_cc_total: int
    flag_total: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _runs_with_gap(idx: np.ndarray, t: np.ndarray, gap_s: float) -> list[tuple[int, int]]:
    """Split sorted sample indices into runs, breaking on time gaps > gap_s."""
    if idx.size == 0:
        return []
    breaks = np.nonzero((np.diff(idx) > 1) | (np.diff(t[idx]) > gap_s))[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    return [(int(idx[a]), int(idx[b])) for a, b in zip(starts, ends)]


def _make_segment(stream: VehicleStream, a: int, b: int, source: str) -> CCSegment:
    cur = stream.pack_a[a : b + 1]
    mean_i = float(np.mean(cur))
    cv = float(np.std(cur) / abs(mean_i)) if mean_i != 0 else float("inf")
    return CCSegment(
        vehicle_id=stream.spec.vehicle_id,
        source=source,
        start_idx=a,
        end_idx=b,
        t_start=float(stream.t[a]),
        t_end=float(stream.t[b]),
        duration_s=float(stream.t[b] - stream.t[a]),
        mean_current_a=mean_i,
        current_cv=cv,
        v_start=float(stream.pack_v[a]),
        v_end=float(stream.pack_v[b]),
        mean_temp_c=float(np.mean(stream.temp_c[a : b + 1])),
        sac_delta_ah=float(stream.sac_ah[b] - stream.sac_ah[a]),
    )


def detect_flag_sessions(stream: VehicleStream, config: RunConfig | None = None) -> list[CCSegment]:
    """Maximal chg_state == 1 runs, split on gaps, shorter than 5 min dropped."""
    cfg = config or RunConfig()
    idx = np.nonzero(stream.chg_state == 1)[0]
    segments = []
    for a, b in _runs_with_gap(idx, stream.t, cfg.session_gap_s):
        if stream.t[b] - stream.t[a] < cfg.min_session_s:
            continue
        segments.append(_make_segment(stream, a, b, "flag"))
    return segments


def moving_median(values: np.ndarray, t: np.ndarray, window_s: float) -> np.ndarray:
    """Centered moving median over a time window; handles irregular sampling."""
    n = len(values)
    if n == 0:
        return values.copy()
    dt = np.diff(t)
    if dt.size and np.all(np.abs(dt - dt[0]) < 0.01 * dt[0] + 1e-9):
        half = max(1, int(round(window_s / (2 * dt[0]))))
        k = 2 * half + 1
        if k >= n:
            return np.full(n, np.median(values))
        pad = np.concatenate([values[half:0:-1], values, values[-2 : -half - 2 : -1]])
        strided = np.lib.stride_tricks.sliding_window_view(pad, k)
        return np.median(strided, axis=1)
    out = np.empty(n)
    lo = np.searchsorted(t, t - window_s / 2, side="left")
    hi = np.searchsorted(t, t + window_s / 2, side="right")
    for i in range(n):
        out[i] = np.median(values[lo[i] : hi[i]])
    return out


def verify_physics_segment(
    stream: VehicleStream, a: int, b: int, config: RunConfig | None = None,
    quant_step_v: float | None = None,
) -> bool:
    """Independent re-check of the four CC criteria over samples [a, b].

    1. slow constant current: mean in the CC band, CV < limit;
    2. monotonically increasing voltage, non-strict after median smoothing
       (plateaus are expected at sensor resolution);
    3. increasing SAC: non-decreasing counter with a positive total;
    4. duration above the minimum.
    """
    cfg = config or RunConfig()
    t = stream.t[a : b + 1]
    if t[-1] - t[0] <= cfg.min_session_s:
        return False
    cur = stream.pack_a[a : b + 1]
    mean_i = float(np.mean(cur))
    if not (cfg.cc_current_lo_a <= mean_i <= cfg.cc_current_hi_a):
        return False
    if np.std(cur) / mean_i >= cfg.current_cv_max:
        return False
    v_sm = moving_median(stream.pack_v[a : b + 1], t, cfg.smooth_window_s)
    # non-strict monotonicity as drawdown from the running max: single-step
    # sensor flicker survives the median filter, a genuine decline does not
    slack = 1.5 * quant_step_v if quant_step_v else 1e-9
    if np.max(np.maximum.accumulate(v_sm) - v_sm) > slack:
        return False
    if v_sm[-1] < v_sm[0]:
        return False
    sac = stream.sac_ah[a : b + 1]
    if np.any(np.diff(sac) < -1e-6) or sac[-1] - sac[0] <= 0:
        return False
    return True


def detect_physics_sessions(
    stream: VehicleStream, config: RunConfig | None = None,
    quant_step_v: float | None = None,
) -> list[CCSegment]:
    """Flag-free CC detection: state machine proposes, verifier accepts.

    A candidate opens when current enters the CC band and closes when the
    band or SAC criterion fails for more than ``persist_fail_s`` seconds,
    or the sample stream gaps for longer than ``session_gap_s``.
    """
    cfg = config or RunConfig()
    t, cur, sac = stream.t, stream.pack_a, stream.sac_ah
    n = len(stream)
    in_band = (cur >= cfg.cc_current_lo_a) & (cur <= cfg.cc_current_hi_a)
    sac_ok = np.concatenate([[True], np.diff(sac) >= -1e-6])
    ok = in_band & sac_ok

    candidates: list[tuple[int, int]] = []
    start = last_ok = -1
    fail_since = None
    for i in range(n):
        if start < 0:
            if ok[i]:
                start, last_ok, fail_since = i, i, None
            continue
        gap = t[i] - t[i - 1]
        if gap > cfg.session_gap_s:
            candidates.append((start, last_ok))
            start, last_ok, fail_since = (i, i, None) if ok[i] else (-1, -1, None)
            continue
        if ok[i]:
            last_ok, fail_since = i, None
        else:
            if fail_since is None:
                fail_since = t[i]
            if t[i] - fail_since > cfg.persist_fail_s:
                candidates.append((start, last_ok))
                start, last_ok, fail_since = -1, -1, None
    if start >= 0:
        candidates.append((start, last_ok))

    segments = []
    for a, b in candidates:
        if b <= a:
            continue
        if verify_physics_segment(stream, a, b, cfg, quant_step_v):
            segments.append(_make_segment(stream, a, b, "physics"))
    return segments


def concordance(
    flag: list[CCSegment], physics: list[CCSegment], config: RunConfig | None = None
) -> ConcordanceReport:
    """Temporal-overlap agreement between the two detectors.

    A pair matches when the overlap covers at least ``overlap_match_frac``
    of the shorter segment. Precision is over all physics segments; recall
    is over flag segments whose mean current lies in the CC band (flag
    sessions that are rapid charging are excluded from the denominator,
    because the physics detector excludes them by design). An empty physics
    list leaves precision undefined (None), not zero.
    """
    cfg = config or RunConfig()

    def _matched(seg: CCSegment, others: list[CCSegment]) -> bool:
        shorter_cap = seg.duration_s
        for o in others:
            if o.vehicle_id != seg.vehicle_id:
                continue
            if o.t_start > seg.t_end or o.t_end < seg.t_start:
                continue
            need = cfg.overlap_match_frac * min(shorter_cap, o.duration_s)
            if seg.overlap_s(o) >= need and seg.overlap_s(o) > 0:
                return True
        return False

    flag_cc = [s for s in flag if cfg.cc_current_lo_a <= s.mean_current_a <= cfg.cc_current_hi_a]
    matched_physics = sum(_matched(p, flag) for p in physics)
    matched_flag = sum(_matched(f, physics) for f in flag_cc)
    precision = matched_physics / len(physics) if physics else None
    recall = matched_flag / len(flag_cc) if flag_cc else None
    return ConcordanceReport(
        precision=precision,
        recall=recall,
        matched_physics=matched_physics,
        matched_flag=matched_flag,
        flag_only=len(flag_cc) - matched_flag,
        physics_only=len(physics) - matched_physics,
        physics_total=len(physics),
        flag_cc_total=len(flag_cc),
        flag_total=len(flag),
    )


def segments_to_dataframe(segments: list[CCSegment]) -> pd.DataFrame:
    """Segment export table: one row per segment."""
    return pd.DataFrame(
        [
            {
                "vehicle_id": s.vehicle_id,
                "source": s.source,
                "start": s.t_start,
                "end": s.t_end,
                "mean_a": s.mean_current_a,
                "current_cv": s.current_cv,
                "v_start": s.v_start,
                "v_end": s.v_end,
                "mean_temp": s.mean_temp_c,
                "sac_delta": s.sac_delta_ah,
            }
            for s in segments
        ],
        columns=[
            "vehicle_id", "source", "start", "end", "mean_a",
            "current_cv", "v_start", "v_end", "mean_temp", "sac_delta",
        ],
    )
