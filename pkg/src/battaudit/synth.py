"""Synthetic fleet with planted ground truth for end-to-end verification.

Every quantity the audit pipeline estimates is planted here and written to a
sibling ground-truth file the audit never reads: true capacity, usable
energy, differential-capacity peak position, SOC dwell distribution,
internal resistance, thermal impedance.

Charge-vs-voltage shape is a two-bump differential-capacity model (a
graphite-staging bump and a high-voltage bump over a flat baseline); planted
degradation moves weight from the high bump to the low one, which shifts the
dominant peak downward. Capacity scales the whole curve, so window charge
ratios equal capacity ratios when the shape is held fixed.

Determinism: a scenario seed fully determines the output; every vehicle
draws from its own substream keyed by (seed, platform index, vehicle index),
independent of generation order. SOC is integrated charge over true
capacity. The SAC counter integrates the emitted current trace, so the
charge ledger matches a trapezoidal re-integration exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import GenerationError
from .telemetry import VehicleSpec, VehicleStream

GAS_CONSTANT = 8.314
T_REF_K = 298.15
DRIVE_SPEED_KMH = 40.0


# --------------------------------------------------------------------------
# cell model
# --------------------------------------------------------------------------

@dataclass
class CellShape:
    # bump heights sit near parity so a small weight shift flips the
    # dominant peak (around 9% capacity loss at the default coupling)
    # while window charge shares stay within a few percent of proportional
    v_lo: float = 3.0
    v_hi: float = 4.2
    w_base: float = 0.25
    w1: float = 0.30      # graphite-staging bump, h = w1/s1 = 5.0
    mu1: float = 3.65
    s1: float = 0.06
    w2: float = 0.45      # high-voltage bump, h = w2/s2 = 5.6 (dominant healthy)
    mu2: float = 3.95
    s2: float = 0.08


class CellModel:
    """Normalized charge fraction vs cell voltage, plus its density."""

    def __init__(self, shape: CellShape, n_grid: int = 1600):
        self.shape = shape
        self.grid = np.linspace(shape.v_lo, shape.v_hi, n_grid)
        g = self.grid
        pdf = np.full_like(g, shape.w_base / (shape.v_hi - shape.v_lo))
        for w, mu, s in ((shape.w1, shape.mu1, shape.s1), (shape.w2, shape.mu2, shape.s2)):
            pdf += w * np.exp(-0.5 * ((g - mu) / s) ** 2) / (s * np.sqrt(2 * np.pi))
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(g))])
        self.pdf = pdf / cdf[-1]
        self.cdf = cdf / cdf[-1]

    def q_from_v(self, v):
        return np.interp(v, self.grid, self.cdf)

    def v_from_q(self, q):
        return np.interp(q, self.cdf, self.grid)

    def v_peak(self, lo: float = 3.5, hi: float = 4.15) -> float:
        m = (self.grid >= lo) & (self.grid <= hi)
        return float(self.grid[m][np.argmax(self.pdf[m])])

    def mean_voltage(self) -> float:
        return float(np.trapezoid(self.grid * self.pdf, self.grid))


def degraded_cell(shape: CellShape, d: float, weight_shift: float = 0.5,
                  mu_shift: float = 0.04) -> CellModel:
    """Shape at degradation level d in [0, 1]: weight migrates to the low bump."""
    d = float(np.clip(d, 0.0, 1.0))
    moved = min(weight_shift * d, shape.w2 * 0.9)
    return CellModel(CellShape(
        v_lo=shape.v_lo, v_hi=shape.v_hi, w_base=shape.w_base,
        w1=shape.w1 + moved, mu1=shape.mu1, s1=shape.s1,
        w2=shape.w2 - moved, mu2=shape.mu2 - mu_shift * d, s2=shape.s2,
    ))


# --------------------------------------------------------------------------
# scenario
# --------------------------------------------------------------------------

@dataclass
class PlatformTemplate:
    name: str
    models: list = field(default_factory=lambda: ["model-a"])
    n_vehicles: int = 8
    cell_count: int = 192
    nominal_kwh: float = 77.4
    quant_step_mv: float = 97.5
    soh_model: str = "truthful"            # truthful | clamped | noisy | absent
    capacity_cv: float = 0.0               # manufacturing spread of pristine capacity
    capacity_scales: tuple | None = None   # explicit pristine-capacity multipliers, cycled
    base_mileage_km: tuple = (8000.0, 60000.0)


@dataclass
class DegradationLaw:
    mileage_rate_per_1000km: float = 0.0006  # capacity fraction lost per 1000 km
    high_soc_rate: float = 0.25              # fraction lost per unit dwell fraction >= 80% SOC
    idio_sd: float = 0.0                     # idiosyncratic loss, invisible to usage bins
    peak_weight_shift: float = 0.05
    peak_mu_shift: float = 0.03
    loss_ref: float = 0.20                   # loss mapping to shape-degradation d = 1


@dataclass
class NoiseModel:
    voltage_mv: float = 20.0   # pre-quantization jitter, pack mV
    current_frac: float = 0.01
    temp_c: float = 0.3
    soh_sd: float = 0.0


@dataclass
class UsageModel:
    soc_hi_range: tuple = (62.0, 98.0)    # charge target = lo + propensity * (hi - lo)
    soc_lo_range: tuple = (10.0, 16.0)    # normal-day drive floor
    deep_soc_lo: tuple = (6.0, 10.0)      # periodic deep cycle
    deep_soc_hi: tuple = (91.0, 96.0)
    deep_every_days: int = 3
    charge_current_a: tuple = (9.0, 13.0)
    fast_every_days: int = 4              # 0 disables fast charging
    fast_current_a: tuple = (95.0, 115.0)
    fast_soc_gain: float = 22.0
    cruise_current_a: tuple = (18.0, 26.0)
    burst_extra_a: float = 38.0
    burst_period_s: float = 90.0
    burst_len_s: float = 12.0
    amb_mean_c: tuple = (14.0, 22.0)
    amb_amp_c: float = 4.0


@dataclass
class FleetScenario:
    seed: int
    platforms: list = field(default_factory=list)
    duration_days: int = 3
    start_epoch: float = 1.77e9
    degradation: DegradationLaw = field(default_factory=DegradationLaw)
    noise: NoiseModel = field(default_factory=NoiseModel)
    usage: UsageModel = field(default_factory=UsageModel)
    flag_spurious_per_day: float = 0.0   # planted spurious chg flags per vehicle-day
    flag_dropout_frac: float = 0.0       # charge phases losing their flag
    cv_violation_frac: float = 0.0       # slow charges with unstable current
    emit_cell_voltages: bool = False
    drive_dt_s: float = 2.0
    charge_dt_s: float = 5.0
    fast_dt_s: float = 2.0
    idle_dt_s: float = 60.0
    cell_shape: CellShape = field(default_factory=CellShape)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FleetScenario":
        d = dict(d)
        d["platforms"] = [PlatformTemplate(**_tup(p)) for p in d.get("platforms", [])]
        for key, typ in (("degradation", DegradationLaw), ("noise", NoiseModel),
                         ("usage", UsageModel), ("cell_shape", CellShape)):
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**_tup(d[key]))
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "FleetScenario":
        return cls.from_dict(json.loads(text))


def _tup(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# --------------------------------------------------------------------------
# per-vehicle synthesis
# --------------------------------------------------------------------------

@dataclass
class _Phase:
    kind: str        # idle | drive | charge | fast
    t0: float
    dur: float
    current: float = 0.0        # nominal magnitude
    q0: float = 0.0             # entry charge fraction
    q1: float = 0.0             # exit charge fraction
    flagged: bool = False       # chg_state = 1
    cv_violation: bool = False


def _nominal_ah(kwh: float, cells: int) -> float:
    return kwh * 1000.0 / (cells * 3.7)


class _VehicleSynth:
    def __init__(self, scenario: FleetScenario, plat: PlatformTemplate,
                 p_idx: int, v_idx: int):
        self.sc = scenario
        self.plat = plat
        self.p_idx = p_idx
        self.v_idx = v_idx
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=scenario.seed, spawn_key=(p_idx, v_idx))
        )
        self.vid = f"{plat.name}-{v_idx:03d}"
        self.model = plat.models[v_idx % len(plat.models)]
        u = scenario.usage
        r = self.rng
        self.propensity = r.uniform(0.0, 1.0)
        self.soc_hi = u.soc_hi_range[0] + self.propensity * (u.soc_hi_range[1] - u.soc_hi_range[0])
        self.soc_lo = r.uniform(*u.soc_lo_range)
        self.i_charge = r.uniform(*u.charge_current_a)
        self.i_cruise = r.uniform(*u.cruise_current_a)
        self.i_fast = r.uniform(*u.fast_current_a)
        self.base_km = r.uniform(*plat.base_mileage_km)
        self.amb_mean = r.uniform(*u.amb_mean_c)
        self.amb_phase = r.uniform(0, 2 * np.pi)
        self.r25_ohm = r.uniform(0.045, 0.065)
        self.thermal_z = r.uniform(0.8, 1.3) * 1e-6
        self.imbalance_v = r.uniform(0.0005, 0.003)
        self.sac_base = r.uniform(2000.0, 30000.0)
        self.nominal_ah = _nominal_ah(plat.nominal_kwh, plat.cell_count)
        if plat.capacity_scales:
            scale = plat.capacity_scales[v_idx % len(plat.capacity_scales)]
        else:
            scale = 1.0 + plat.capacity_cv * r.normal()
        self.cap_base = self.nominal_ah * scale

    # -- schedule -----------------------------------------------------------

    def build_schedule(self) -> list[_Phase]:
        # own substream, re-derived per call: the planning pass and the
        # synthesis pass must see the identical schedule randomness
        r = np.random.default_rng(
            np.random.SeedSequence(entropy=self.sc.seed, spawn_key=(self.p_idx, self.v_idx, 7))
        )
        sc, u = self.sc, self.sc.usage
        t = sc.start_epoch
        phases: list[_Phase] = []
        q = self.soc_hi / 100.0  # start parked at the charge target
        cap = self.capacity      # set by plant() before scheduling

        def _add(kind, dur, current=0.0, q1=None, flagged=False, cv_violation=False):
            nonlocal t, q
            q_end = q if q1 is None else q1
            phases.append(_Phase(kind, t, dur, current, q, q_end, flagged, cv_violation))
            t += dur
            q = q_end

        for day in range(sc.duration_days):
            day_start = sc.start_epoch + day * 86400.0
            deep = u.deep_every_days > 0 and day % u.deep_every_days == u.deep_every_days - 1
            fast_day = u.fast_every_days > 0 and day % u.fast_every_days == 1
            _add("idle", max(60.0, day_start + 6 * 3600.0 - t))

            lo = r.uniform(*u.deep_soc_lo) if deep else self.soc_lo + r.uniform(-2, 2)
            lo = min(lo, q * 100 - 8.0)
            mean_drive = self.i_cruise + u.burst_extra_a * (u.burst_len_s / u.burst_period_s)
            dq_ah = max(q - lo / 100.0, 0.04) * cap
            _add("drive", dq_ah / mean_drive * 3600.0, current=mean_drive,
                 q1=max(q - dq_ah / cap, 0.02))
            _add("idle", r.uniform(1200, 2400))

            if fast_day and not deep:
                gain = min(u.fast_soc_gain / 100.0, 0.97 - q)
                if gain > 0.02:
                    _add("fast", gain * cap / self.i_fast * 3600.0, current=self.i_fast,
                         q1=q + gain, flagged=True)
                _add("idle", r.uniform(1200, 2400))

            hi = r.uniform(*u.deep_soc_hi) if deep else self.soc_hi + r.uniform(-1.5, 0.0)
            hi = max(hi, q * 100 + 10.0)
            evening = max(day_start + 18 * 3600.0, t + 900.0)
            _add("idle", evening - t)
            dq_ah = (hi / 100.0 - q) * cap
            flagged = r.random() >= self.sc.flag_dropout_frac
            cv_bad = r.random() < self.sc.cv_violation_frac
            _add("charge", dq_ah / self.i_charge * 3600.0, current=self.i_charge,
                 q1=hi / 100.0, flagged=flagged, cv_violation=cv_bad)
        _add("idle", max(1800.0, sc.start_epoch + sc.duration_days * 86400.0 + 6 * 3600.0 - t))
        return phases

    # -- planted truth ------------------------------------------------------

    def plant(self):
        """Fix capacity and cell shape from the usage plan (two-pass dwell)."""
        deg = self.sc.degradation
        # dwell above the high-SOC edge, from the plan with nominal capacity
        self.capacity = self.cap_base
        plan = self.build_schedule()
        total = sum(p.dur for p in plan)
        high = sum(
            _ramp_time_above(p, 80.0) for p in plan
        )
        self.dwell80 = high / total
        loss_usage = (
            deg.mileage_rate_per_1000km * self.base_km / 1000.0
            + deg.high_soc_rate * self.dwell80
        )
        loss_idio = abs(self.rng.normal(0.0, deg.idio_sd)) if deg.idio_sd > 0 else 0.0
        self.loss = float(np.clip(loss_usage + loss_idio, 0.0, 0.55))
        self.capacity = self.cap_base * (1.0 - self.loss)
        d_shape = min(self.loss / deg.loss_ref, 1.0) if deg.loss_ref > 0 else 0.0
        self.cell = degraded_cell(self.sc.cell_shape, d_shape,
                                  deg.peak_weight_shift, deg.peak_mu_shift)
        self.v_peak_true = self.cell.v_peak()
        self.usable_kwh = self.capacity * self.cell.mean_voltage() * self.plat.cell_count / 1000.0

    # -- signal synthesis ----------------------------------------------------

    def synthesize(self):
        sc, u = self.sc, self.sc.usage
        phases = self.build_schedule()
        cols = {k: [] for k in ("t", "i", "q", "flag")}
        for p in phases:
            dt = {"idle": sc.idle_dt_s, "drive": sc.drive_dt_s,
                  "charge": sc.charge_dt_s, "fast": sc.fast_dt_s}[p.kind]
            n = max(int(p.dur // dt), 1)
            t = p.t0 + np.arange(n) * dt
            if p.kind == "idle":
                i = np.zeros(n)
                q = np.full(n, p.q0)
            elif p.kind == "drive":
                tau = (t - p.t0) % u.burst_period_s
                i = -(self.i_cruise + np.where(tau < u.burst_len_s, u.burst_extra_a, 0.0))
                frac = np.concatenate([[0.0], np.cumsum(-i[:-1] * dt)]) / 3600.0 / self.capacity
                scale = (p.q0 - p.q1) / frac[-1] if frac[-1] > 0 else 1.0
                i = i * scale
                q = p.q0 - frac * scale
            else:
                i = np.full(n, p.current)
                if p.cv_violation:
                    i = i * (1.0 + 0.3 * self.rng.standard_normal(n))
                    i = np.clip(i, 0.5, None)
                q = p.q0 + np.concatenate([[0.0], np.cumsum(i[:-1] * dt)]) / 3600.0 / self.capacity
            cols["t"].append(t)
            cols["i"].append(i)
            cols["q"].append(np.clip(q, 0.0, 1.0))
            cols["flag"].append(np.full(n, 1 if p.flagged else 0, dtype=np.int8))

        t = np.concatenate(cols["t"])
        i_true = np.concatenate(cols["i"])
        q = np.concatenate(cols["q"])
        flag = np.concatenate(cols["flag"])

        # spurious flags: short runs during idle (near-zero current)
        n_spur = self.rng.poisson(sc.flag_spurious_per_day * sc.duration_days)
        idle_idx = np.nonzero((i_true == 0) & (flag == 0))[0]
        for _ in range(n_spur):
            if idle_idx.size < 20:
                break
            start = int(self.rng.choice(idle_idx))
            span = int(self.rng.uniform(360, 720))
            end_t = t[start] + span
            j = start
            while j < len(t) and t[j] <= end_t and i_true[j] == 0:
                flag[j] = 1
                j += 1

        temp = self._temperature(t, i_true)
        v_cell = self.cell.v_from_q(q)
        r_pack = self.r25_ohm * np.exp(
            20000.0 / GAS_CONSTANT * (1.0 / (temp + 273.15) - 1.0 / T_REF_K)
        )
        v_pack = v_cell * self.plat.cell_count + i_true * r_pack

        nz = self.sc.noise
        v_meas = v_pack + self.rng.normal(0.0, nz.voltage_mv / 1000.0, len(t))
        step = self.plat.quant_step_mv / 1000.0
        v_meas = np.round(v_meas / step) * step
        i_meas = i_true + self.rng.normal(0.0, 1.0, len(t)) * np.maximum(
            nz.current_frac * np.abs(i_true), 0.02
        )
        temp_meas = temp + self.rng.normal(0.0, nz.temp_c, len(t))

        dt_arr = np.diff(t)
        i_pos = np.clip(i_meas, 0.0, None)
        sac = self.sac_base + np.concatenate(
            [[0.0], np.cumsum(0.5 * (i_pos[1:] + i_pos[:-1]) * dt_arr)]
        ) / 3600.0
        speed = np.where(i_true < -self.sc.usage.cruise_current_a[0] * 0.5, DRIVE_SPEED_KMH, 0.0)
        km = self.base_km + np.concatenate(
            [[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * dt_arr)]
        ) / 3600.0

        soc = np.round(q * 100.0, 1)
        cell_v = None
        if sc.emit_cell_voltages:
            offsets = self.rng.normal(0.0, self.imbalance_v, self.plat.cell_count)
            offsets -= offsets.mean()
            self.cell_std_true = float(np.std(offsets))
            cell_v = v_meas[:, None] / self.plat.cell_count + offsets[None, :]
        else:
            self.cell_std_true = None

        # planted dwell: time-weighted occupancy of the true SOC trace
        w = np.minimum(dt_arr, 120.0)
        hist, _ = np.histogram(q[:-1] * 100.0, bins=np.arange(0.0, 101.0, 10.0), weights=w)
        self.soc_dwell_true = hist / hist.sum()

        arrays = dict(
            t=np.round(t, 1), pack_v=np.round(v_meas, 4), pack_a=np.round(i_meas, 4),
            soc=soc, temp_c=np.round(temp_meas, 3), sac_ah=np.round(sac, 6),
            mileage_km=np.round(km, 3), chg_state=flag,
        )
        return arrays, cell_v

    def _temperature(self, t: np.ndarray, i: np.ndarray) -> np.ndarray:
        """Ambient sinusoid + fast-charge heating + exponential relaxation."""
        amb = self.amb_mean + self.sc.usage.amb_amp_c * np.sin(
            2 * np.pi * (t - t[0]) / 86400.0 + self.amb_phase
        )
        temp = np.empty_like(t)
        temp[0] = amb[0]
        tau = 1800.0
        fast = i > self.sc.usage.fast_current_a[0] * 0.8
        dt = np.diff(t)
        # piecewise: pure I^2 integration while fast charging, relaxation otherwise
        cur = temp[0]
        for k in range(1, len(t)):
            if fast[k - 1]:
                cur = cur + self.thermal_z * i[k - 1] ** 2 * dt[k - 1]
            else:
                decay = np.exp(-dt[k - 1] / tau)
                cur = amb[k] + (cur - amb[k]) * decay
            temp[k] = cur
        return temp

    def spec(self) -> VehicleSpec:
        soh = self._bms_soh()
        return VehicleSpec(
            vehicle_id=self.vid, platform=self.plat.name, model=self.model,
            cell_count=self.plat.cell_count, nominal_kwh=self.plat.nominal_kwh,
            quantization_step_mv=self.plat.quant_step_mv, bms_soh=soh,
        )

    def _bms_soh(self) -> float | None:
        mode = self.plat.soh_model
        truthful = 100.0 * self.capacity / self.cap_base
        if mode == "absent":
            return None
        if mode == "truthful":
            return round(truthful + self.rng.normal(0.0, self.sc.noise.soh_sd), 2)
        if mode == "clamped":
            val = max(99.5, 100.0 - 0.03 * (100.0 - truthful)) + self.rng.normal(0.0, 0.12)
            return round(min(val, 100.0), 2)
        if mode == "noisy":
            return round(truthful + self.rng.normal(0.0, 5.0), 2)
        raise GenerationError(f"unknown soh_model {mode!r}")

    def truth_row(self) -> dict:
        row = {
            "vehicle_id": self.vid,
            "platform": self.plat.name,
            "model": self.model,
            "true_capacity_ah": self.capacity,
            "pristine_capacity_ah": self.cap_base,
            "loss_frac": self.loss,
            "usable_kwh": self.usable_kwh,
            "v_peak_true": self.v_peak_true,
            "true_soh": 100.0 * self.capacity / self.cap_base,
            "r25_pack_ohm": self.r25_ohm,
            "thermal_z": self.thermal_z,
            "dwell80_frac": self.dwell80,
            "base_mileage_km": self.base_km,
            "cell_std_true_v": self.cell_std_true,
        }
        for b in range(10):
            row[f"soc_dwell_{b}"] = float(self.soc_dwell_true[b])
        return row


def _ramp_time_above(p: _Phase, soc_edge: float) -> float:
    """Time a phase spends at or above soc_edge percent (linear SOC ramps)."""
    s0, s1 = p.q0 * 100.0, p.q1 * 100.0
    if s0 == s1:
        return p.dur if s0 >= soc_edge else 0.0
    lo, hi = min(s0, s1), max(s0, s1)
    if hi <= soc_edge:
        return 0.0
    if lo >= soc_edge:
        return p.dur
    return p.dur * (hi - soc_edge) / (hi - lo)


# --------------------------------------------------------------------------
# fleet entry points
# --------------------------------------------------------------------------

def generate(scenario: FleetScenario):
    """Build the fleet: (streams, specs, ground-truth table).

    Raises GenerationError when a scenario is infeasible (e.g. a platform
    with no vehicles or a charge plan that cannot reach its target).
    """
    if not scenario.platforms:
        raise GenerationError("scenario has no platforms")
    streams: dict[str, VehicleStream] = {}
    specs: dict[str, VehicleSpec] = {}
    rows = []
    for p_idx, plat in enumerate(scenario.platforms):
        if plat.n_vehicles < 1:
            raise GenerationError(f"platform {plat.name}: n_vehicles must be >= 1")
        for v_idx in range(plat.n_vehicles):
            veh = _VehicleSynth(scenario, plat, p_idx, v_idx)
            veh.plant()
            arrays, cell_v = veh.synthesize()
            spec = veh.spec()
            stream = VehicleStream(
                spec=spec,
                t=arrays["t"], pack_v=arrays["pack_v"], pack_a=arrays["pack_a"],
                soc=arrays["soc"], temp_c=arrays["temp_c"], sac_ah=arrays["sac_ah"],
                mileage_km=arrays["mileage_km"], chg_state=arrays["chg_state"],
                cell_v=np.round(cell_v, 6) if cell_v is not None else None,
            )
            streams[veh.vid] = stream
            specs[veh.vid] = spec
            rows.append(veh.truth_row())
    truth = pd.DataFrame(rows)
    return streams, specs, truth


def write_fleet(scenario: FleetScenario, outdir: str | Path) -> dict:
    """Generate and write telemetry.csv, vehicles.csv and ground_truth.csv.

    The ground-truth file is a sibling the analysis commands refuse to read;
    it exists only so tests and humans can check the audit against the
    plant.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    streams, specs, truth = generate(scenario)
    tele = pd.concat([s.to_dataframe() for s in streams.values()], ignore_index=True)
    spec_rows = [
        {
            "vehicle_id": s.vehicle_id, "platform": s.platform, "model": s.model,
            "cell_count": s.cell_count, "nominal_kwh": s.nominal_kwh,
            "quant_mv": s.quantization_step_mv,
            "bms_soh": s.bms_soh if s.bms_soh is not None else "",
        }
        for s in specs.values()
    ]
    paths = {
        "telemetry": outdir / "telemetry.csv",
        "vehicles": outdir / "vehicles.csv",
        "ground_truth": outdir / "ground_truth.csv",
        "scenario": outdir / "scenario.json",
    }
    tele.to_csv(paths["telemetry"], index=False)
    pd.DataFrame(spec_rows).to_csv(paths["vehicles"], index=False)
    truth.to_csv(paths["ground_truth"], index=False)
    paths["scenario"].write_text(scenario.to_json())
    return {k: str(v) for k, v in paths.items()}


# --------------------------------------------------------------------------
# laboratory cell traces
# --------------------------------------------------------------------------

def generate_labcell(
    n_cycles: int = 198,
    capacity_ah: float = 55.6,
    soh_end: float = 0.097,
    soh_profile: np.ndarray | None = None,
    shape_drift: float = 0.0,
    noise_frac: float = 0.0,
    gain_drift_frac: float = 0.0,
    current_a: float = 10.0,
    v_lo: float = 2.5,
    v_hi: float = 4.2,
    sample_dt_s: float = 5.0,
    seed: int = 0,
):
    """Aging cell: per-cycle CC-CV charge traces plus exact reference capacities.

    The default profile fades smoothly from 100% to ``soh_end``;
    ``shape_drift`` in [0, 1] adds a degradation-coupled change of the
    charge-curve shape on top of pure capacity scaling. ``noise_frac`` is
    per-sample current noise; ``gain_drift_frac`` is a per-cycle current
    calibration error, the kind that moves a whole cycle's measured charge
    together. Returns (cycles, rpt_ah) where each cycle is a DataFrame with
    columns cycle, timestamp, voltage, current.
    """
    if n_cycles < 20:
        raise GenerationError("labcell generation requires n_cycles >= 20")
    rng = np.random.default_rng(seed)
    if soh_profile is None:
        x = np.linspace(0.0, 1.0, n_cycles)
        soh_profile = 1.0 - (1.0 - soh_end) * x**1.3
    soh_profile = np.asarray(soh_profile, dtype=float)
    if len(soh_profile) != n_cycles:
        raise GenerationError("soh_profile length must equal n_cycles")

    base = CellShape(v_lo=v_lo, v_hi=v_hi, w_base=0.30, w1=0.26, mu1=3.45, s1=0.10,
                     w2=0.44, mu2=3.95, s2=0.10)
    cycles = []
    rpt = np.empty(n_cycles)
    t0 = 0.0
    for c in range(n_cycles):
        soh = soh_profile[c]
        cap = capacity_ah * soh
        rpt[c] = cap
        cell = degraded_cell(base, (1.0 - soh) * shape_drift, weight_shift=0.4, mu_shift=0.05)

        cc_dur = cap / current_a * 3600.0
        t_rest = np.arange(0.0, 120.0, sample_dt_s)
        t_cc = np.arange(0.0, cc_dur, sample_dt_s)
        q_cc = current_a * t_cc / 3600.0 / cap
        v_cc = cell.v_from_q(np.clip(q_cc, 0.0, 1.0))
        tau_cv = 600.0
        t_cv = np.arange(0.0, 4.0 * tau_cv, sample_dt_s)
        i_cv = current_a * np.exp(-t_cv / tau_cv)

        t = np.concatenate([t_rest, 120.0 + t_cc, 120.0 + cc_dur + t_cv,
                            [120.0 + cc_dur + 4.0 * tau_cv + 60.0]])
        v = np.concatenate([np.full(len(t_rest), v_lo), v_cc,
                            np.full(len(t_cv), v_hi), [v_hi]])
        i = np.concatenate([np.zeros(len(t_rest)), np.full(len(t_cc), current_a),
                            i_cv, [0.0]])
        if gain_drift_frac > 0:
            i = i * (1.0 + gain_drift_frac * rng.standard_normal())
        if noise_frac > 0:
            i = i + rng.normal(0.0, 1.0, len(i)) * np.maximum(noise_frac * np.abs(i), 0.001)
        cycles.append(pd.DataFrame({
            "cycle": c, "timestamp": t0 + t, "voltage": v, "current": i,
        }))
        t0 += t[-1] + 3600.0
    return cycles, rpt


def write_labcell(outdir: str | Path, **kwargs) -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cycles, rpt = generate_labcell(**kwargs)
    traces = pd.concat(cycles, ignore_index=True)
    paths = {"traces": outdir / "labcell_traces.csv", "rpt": outdir / "labcell_rpt.csv"}
    traces.to_csv(paths["traces"], index=False)
    pd.DataFrame({"cycle": np.arange(len(rpt)), "rpt_ah": rpt}).to_csv(paths["rpt"], index=False)
    return {k: str(v) for k, v in paths.items()}
