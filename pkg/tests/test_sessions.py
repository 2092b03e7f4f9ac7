import numpy as np
import pytest

from battaudit.config import RunConfig
from battaudit.sessions import (
    CCSegment,
    concordance,
    detect_flag_sessions,
    detect_physics_sessions,
    verify_physics_segment,
)

from conftest import charge_ramp_stream, make_stream


def test_flag_short_run_dropped(cfg):
    s = make_stream(t=np.arange(5.0), pack_a=10.0, chg_state=[0, 1, 1, 1, 0])
    assert detect_flag_sessions(s, cfg) == []


def test_flag_600s_run(cfg):
    n = 600
    s = make_stream(t=np.arange(float(n)), pack_a=10.0, chg_state=np.ones(n))
    segs = detect_flag_sessions(s, cfg)
    assert len(segs) == 1
    assert segs[0].duration_s == pytest.approx(599.0)


def test_flag_runs_match_rle_oracle(cfg):
    rng = np.random.default_rng(2)
    flags = np.zeros(5000, dtype=np.int8)
    # two runs separated by 10 minutes of zeros
    flags[100:800] = 1
    flags[1400:2300] = 1
    s = make_stream(t=np.arange(5000.0), pack_a=10.0, chg_state=flags)
    segs = detect_flag_sessions(s, cfg)

    # run-length-encoding oracle
    runs = []
    start = None
    for i, f in enumerate(flags):
        if f and start is None:
            start = i
        elif not f and start is not None:
            runs.append((start, i - 1))
            start = None
    runs = [(a, b) for a, b in runs if b - a >= cfg.min_session_s]
    assert [(g.start_idx, g.end_idx) for g in segs] == runs


def test_flag_gap_splits_session(cfg):
    t = np.concatenate([np.arange(0.0, 400.0), np.arange(1000.0, 1400.0)])
    s = make_stream(t=t, pack_a=10.0, chg_state=np.ones(len(t)))
    segs = detect_flag_sessions(s, cfg)
    assert len(segs) == 2


def test_physics_clean_ramp(cfg):
    s = charge_ramp_stream(duration_s=1200.0, v0=3.60, v1=3.70)
    segs = detect_physics_sessions(s, cfg, quant_step_v=0.0975)
    assert len(segs) == 1
    seg = segs[0]
    assert seg.v_end >= seg.v_start
    assert seg.current_cv < 0.25
    assert seg.sac_delta_ah > 0


def test_physics_rejects_fast_charge(cfg):
    s = charge_ramp_stream(duration_s=1200.0, current_a=80.0)
    assert detect_physics_sessions(s, cfg, quant_step_v=0.0975) == []


def test_physics_rejects_unstable_current(cfg):
    rng = np.random.default_rng(0)
    s = charge_ramp_stream(duration_s=1200.0)
    noisy = s.pack_a + 0.30 * 10.0 * rng.standard_normal(len(s))
    s2 = make_stream(t=s.t, pack_v=s.pack_v, pack_a=np.clip(noisy, 0.1, None),
                     soc=s.soc, chg_state=np.ones(len(s)))
    assert detect_physics_sessions(s2, cfg, quant_step_v=0.0975) == []


def test_physics_rejects_declining_voltage(cfg):
    s = charge_ramp_stream(duration_s=1200.0, v0=3.80, v1=3.60)
    assert detect_physics_sessions(s, cfg, quant_step_v=0.0975) == []


def test_accepted_segments_pass_independent_verifier(cfg):
    from battaudit.synth import FleetScenario, PlatformTemplate, generate

    sc = FleetScenario(seed=5, duration_days=2,
                       platforms=[PlatformTemplate(name="EGMP", n_vehicles=3)])
    streams, _, _ = generate(sc)
    for s in streams.values():
        for seg in detect_physics_sessions(s, cfg, quant_step_v=0.0975):
            assert verify_physics_segment(s, seg.start_idx, seg.end_idx, cfg, 0.0975)


def test_translation_invariance(cfg):
    s = charge_ramp_stream(duration_s=1200.0)
    shifted = make_stream(t=s.t + 5000.0, pack_v=s.pack_v, pack_a=s.pack_a,
                          soc=s.soc, chg_state=s.chg_state, sac_ah=s.sac_ah)
    a = detect_physics_sessions(s, cfg, quant_step_v=0.0975)
    b = detect_physics_sessions(shifted, cfg, quant_step_v=0.0975)
    assert len(a) == len(b) == 1
    assert b[0].t_start - a[0].t_start == pytest.approx(5000.0)
    assert b[0].duration_s == pytest.approx(a[0].duration_s)


# --------------------------------------------------------------------------
# concordance
# --------------------------------------------------------------------------

def _seg(vid, t0, t1, source="flag", mean_a=10.0):
    return CCSegment(
        vehicle_id=vid, source=source, start_idx=0, end_idx=1,
        t_start=t0, t_end=t1, duration_s=t1 - t0, mean_current_a=mean_a,
        current_cv=0.01, v_start=690.0, v_end=710.0, mean_temp_c=22.0,
        sac_delta_ah=10.0,
    )


def test_concordance_identical_lists(cfg):
    flag = [_seg("v", 0, 1000), _seg("v", 5000, 7000)]
    phys = [_seg("v", 0, 1000, "physics"), _seg("v", 5000, 7000, "physics")]
    rep = concordance(flag, phys, cfg)
    assert rep.precision == 1.0
    assert rep.recall == 1.0


def test_concordance_empty_physics(cfg):
    rep = concordance([_seg("v", 0, 1000)], [], cfg)
    assert rep.precision is None
    assert rep.recall == 0.0


def test_concordance_rapid_charges_excluded_from_recall(cfg):
    flag = [_seg("v", 0, 1000), _seg("v", 5000, 6000, mean_a=100.0)]
    phys = [_seg("v", 0, 1000, "physics")]
    rep = concordance(flag, phys, cfg)
    assert rep.flag_cc_total == 1
    assert rep.recall == 1.0
    assert rep.precision == 1.0


def test_concordance_does_not_match_across_vehicles(cfg):
    flag = [_seg("v1", 0, 1000)]
    phys = [_seg("v2", 0, 1000, "physics")]
    rep = concordance(flag, phys, cfg)
    assert rep.precision == 0.0
    assert rep.recall == 0.0


def brute_force_concordance(flag, phys, cfg):
    """Independent interval-overlap enumeration."""
    def overlap(a, b):
        return max(0.0, min(a.t_end, b.t_end) - max(a.t_start, b.t_start))

    def matched(seg, others):
        return any(
            o.vehicle_id == seg.vehicle_id
            and overlap(seg, o) > 0
            and overlap(seg, o) >= cfg.overlap_match_frac * min(seg.duration_s, o.duration_s)
            for o in others
        )

    flag_cc = [s for s in flag if cfg.cc_current_lo_a <= s.mean_current_a <= cfg.cc_current_hi_a]
    mp = sum(matched(p, flag) for p in phys)
    mf = sum(matched(f, phys) for f in flag_cc)
    precision = mp / len(phys) if phys else None
    recall = mf / len(flag_cc) if flag_cc else None
    return precision, recall


def test_concordance_matches_bruteforce_on_noisy_fleet(cfg):
    from battaudit.sessions import detect_flag_sessions
    from battaudit.synth import FleetScenario, PlatformTemplate, generate

    sc = FleetScenario(
        seed=13, duration_days=3,
        platforms=[PlatformTemplate(name="EGMP", n_vehicles=5)],
        flag_spurious_per_day=1.0, flag_dropout_frac=0.15, cv_violation_frac=0.2,
    )
    streams, _, _ = generate(sc)
    flag, phys = [], []
    for s in streams.values():
        flag += detect_flag_sessions(s, cfg)
        phys += detect_physics_sessions(s, cfg, quant_step_v=0.0975)
    rep = concordance(flag, phys, cfg)
    expected_p, expected_r = brute_force_concordance(flag, phys, cfg)
    assert rep.precision == pytest.approx(expected_p, abs=1e-9)
    assert rep.recall == pytest.approx(expected_r, abs=1e-9)
    assert rep.precision < 1.0  # dropouts leave unflagged physics segments
    assert rep.recall < 1.0     # unstable-current sessions stay flagged but fail physics
