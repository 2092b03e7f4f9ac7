"""Telemetry data contract: records, vehicle metadata, ingestion, quantization.

Sign convention: charging current is positive, discharge negative. This is
fixed across the whole pipeline and across the CSV/JSONL interfaces.

CSV columns (header required)::

    vehicle_id,timestamp,pack_v,pack_a,soc,temp_c,sac_ah,mileage_km,chg_state[,cell_v_0..cell_v_{n-1}]

JSONL carries one object per record with the same field names. The vehicle
spec table is a CSV with columns::

    vehicle_id,platform,model,cell_count,nominal_kwh,quant_mv,bms_soh

An empty ``bms_soh`` means the BMS does not expose state of health; an empty
``quant_mv`` means the voltage quantization step must be detected empirically.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import InsufficientDataError, QuantizationUndetectableError, SchemaError

REQUIRED_COLUMNS = [
    "vehicle_id",
    "timestamp",
    "pack_v",
    "pack_a",
    "soc",
    "temp_c",
    "sac_ah",
    "mileage_km",
    "chg_state",
]

SPEC_COLUMNS = ["vehicle_id", "platform", "model", "cell_count", "nominal_kwh", "quant_mv", "bms_soh"]


@dataclass(frozen=True)
class VehicleSpec:
    """Static vehicle metadata."""

    vehicle_id: str
    platform: str
    model: str
    cell_count: int
    nominal_kwh: float
    quantization_step_mv: float | None = None
    bms_soh: float | None = None

    @property
    def soh_available(self) -> bool:
        return self.bms_soh is not None

    def __post_init__(self):
        if self.cell_count <= 0:
            raise SchemaError(f"{self.vehicle_id}: cell_count must be positive")
        if self.nominal_kwh <= 0:
            raise SchemaError(f"{self.vehicle_id}: nominal_kwh must be positive")
        if self.quantization_step_mv is not None and self.quantization_step_mv <= 0:
            raise SchemaError(f"{self.vehicle_id}: quant_mv must be positive when set")


@dataclass(frozen=True)
class TelemetryRecord:
    """One timestamped sample. Charging current positive, discharge negative."""

    timestamp: float
    pack_voltage: float
    pack_current: float
    soc: float
    temperature: float
    sac: float
    mileage: float
    chg_state: int
    cell_voltages: tuple | None = None


@dataclass
class VehicleStream:
    """Time-ordered, validated telemetry for one vehicle.

    Columnar storage; arrays are made read-only after construction so a
    stream can be shared across threads without copies.
    """

    spec: VehicleSpec
    t: np.ndarray
    pack_v: np.ndarray
    pack_a: np.ndarray
    soc: np.ndarray
    temp_c: np.ndarray
    sac_ah: np.ndarray
    mileage_km: np.ndarray
    chg_state: np.ndarray
    cell_v: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.t)
        for name in ("pack_v", "pack_a", "soc", "temp_c", "sac_ah", "mileage_km", "chg_state"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"{self.spec.vehicle_id}: column {name} length mismatch")
        if n > 1 and not np.all(np.diff(self.t) > 0):
            raise SchemaError(f"{self.spec.vehicle_id}: timestamps not strictly increasing")
        if self.cell_v is not None and self.cell_v.shape != (n, self.spec.cell_count):
            raise SchemaError(
                f"{self.spec.vehicle_id}: cell_v shape {self.cell_v.shape} != "
                f"(n, cell_count={self.spec.cell_count})"
            )
        for name in ("t", "pack_v", "pack_a", "soc", "temp_c", "sac_ah", "mileage_km", "chg_state"):
            getattr(self, name).setflags(write=False)
        if self.cell_v is not None:
            self.cell_v.setflags(write=False)

    def __len__(self) -> int:
        return len(self.t)

    def record(self, i: int) -> TelemetryRecord:
        return TelemetryRecord(
            timestamp=float(self.t[i]),
            pack_voltage=float(self.pack_v[i]),
            pack_current=float(self.pack_a[i]),
            soc=float(self.soc[i]),
            temperature=float(self.temp_c[i]),
            sac=float(self.sac_ah[i]),
            mileage=float(self.mileage_km[i]),
            chg_state=int(self.chg_state[i]),
            cell_voltages=tuple(self.cell_v[i]) if self.cell_v is not None else None,
        )

    def to_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "vehicle_id": self.spec.vehicle_id,
                "timestamp": self.t,
                "pack_v": self.pack_v,
                "pack_a": self.pack_a,
                "soc": self.soc,
                "temp_c": self.temp_c,
                "sac_ah": self.sac_ah,
                "mileage_km": self.mileage_km,
                "chg_state": self.chg_state,
            }
        )
        if self.cell_v is not None:
            for j in range(self.spec.cell_count):
                df[f"cell_v_{j}"] = self.cell_v[:, j]
        return df


@dataclass
class IngestResult:
    """Outcome of one ingestion run: streams plus an accounting of rejects.

    Ingestion is lossless for valid rows: record count + reject count equals
    the input row count.
    """

    streams: dict[str, VehicleStream]
    n_rows: int
    n_records: int
    reject_counts: dict[str, int] = field(default_factory=dict)
    rejected_streams: dict[str, str] = field(default_factory=dict)

    @property
    def n_rejects(self) -> int:
        return sum(self.reject_counts.values())


def load_specs(path: str | Path) -> dict[str, VehicleSpec]:
    """Load the vehicle spec table, keyed by vehicle_id."""
    df = pd.read_csv(path, dtype={"vehicle_id": str})
    missing = [c for c in SPEC_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"spec file {path}: missing column(s) {', '.join(missing)}")
    specs = {}
    for row in df.itertuples(index=False):
        quant = None if pd.isna(row.quant_mv) else float(row.quant_mv)
        soh = None if pd.isna(row.bms_soh) else float(row.bms_soh)
        specs[str(row.vehicle_id)] = VehicleSpec(
            vehicle_id=str(row.vehicle_id),
            platform=str(row.platform),
            model=str(row.model),
            cell_count=int(row.cell_count),
            nominal_kwh=float(row.nominal_kwh),
            quantization_step_mv=quant,
            bms_soh=soh,
        )
    return specs


def _read_telemetry(path: Path) -> pd.DataFrame:
    if path.suffix.lower() in (".jsonl", ".ndjson"):
        return pd.read_json(path, lines=True, dtype=False)
    return pd.read_csv(path, dtype={"vehicle_id": str}, low_memory=False)


def ingest_stream(
    path: str | Path,
    spec_source: str | Path | dict[str, VehicleSpec],
    max_inversion_frac: float = 1e-3,
) -> IngestResult:
    """Ingest a telemetry file into one validated VehicleStream per vehicle.

    Malformed rows are counted per reason, never silently dropped. A stream
    whose timestamps are out of order is re-sorted when the inverted pairs
    are a fraction <= ``max_inversion_frac`` of its adjacent pairs,
    otherwise the whole stream is rejected.
    """
    path = Path(path)
    specs = spec_source if isinstance(spec_source, dict) else load_specs(spec_source)
    df = _read_telemetry(path)
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {', '.join(missing)}")

    n_rows = len(df)
    rejects: dict[str, int] = {}

    def _count(reason: str, k: int):
        if k:
            rejects[reason] = rejects.get(reason, 0) + int(k)

    df["vehicle_id"] = df["vehicle_id"].astype(str)
    numeric_cols = [c for c in REQUIRED_COLUMNS if c != "vehicle_id"]
    for c in numeric_cols:
        df[c] = pd.to_numeric(df[c], errors="coerce")

    bad_numeric = df[numeric_cols].isna().any(axis=1)
    _count("malformed_value", bad_numeric.sum())
    df = df[~bad_numeric]

    bad_soc = (df["soc"] < 0) | (df["soc"] > 100)
    _count("soc_out_of_range", bad_soc.sum())
    df = df[~bad_soc]

    bad_flag = ~df["chg_state"].isin([0, 1])
    _count("bad_chg_state", bad_flag.sum())
    df = df[~bad_flag]

    streams: dict[str, VehicleStream] = {}
    rejected_streams: dict[str, str] = {}
    n_records = 0
    for vid, g in df.groupby("vehicle_id", sort=True):
        spec = specs.get(vid)
        if spec is None:
            _count("unknown_vehicle", len(g))
            rejected_streams[vid] = "no spec entry"
            continue
        t = g["timestamp"].to_numpy(dtype=float)
        if len(t) > 1:
            inversions = int(np.sum(np.diff(t) <= 0))
            if inversions:
                if inversions / (len(t) - 1) > max_inversion_frac:
                    _count("unordered_stream", len(g))
                    rejected_streams[vid] = (
                        f"{inversions} timestamp inversions exceed tolerance"
                    )
                    continue
                g = g.iloc[np.argsort(t, kind="stable")]
                t = g["timestamp"].to_numpy(dtype=float)
                dup = np.concatenate([[False], np.diff(t) == 0])
                _count("duplicate_timestamp", dup.sum())
                g = g.iloc[~dup]
                t = g["timestamp"].to_numpy(dtype=float)
        cell_cols = [f"cell_v_{j}" for j in range(spec.cell_count)]
        cell_v = None
        if all(c in g.columns for c in cell_cols):
            cells = g[cell_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
            if not np.isnan(cells).all():
                cell_v = cells
        streams[vid] = VehicleStream(
            spec=spec,
            t=t,
            pack_v=g["pack_v"].to_numpy(dtype=float),
            pack_a=g["pack_a"].to_numpy(dtype=float),
            soc=g["soc"].to_numpy(dtype=float),
            temp_c=g["temp_c"].to_numpy(dtype=float),
            sac_ah=g["sac_ah"].to_numpy(dtype=float),
            mileage_km=g["mileage_km"].to_numpy(dtype=float),
            chg_state=g["chg_state"].to_numpy(dtype=np.int8),
            cell_v=cell_v,
        )
        n_records += len(t)
    return IngestResult(
        streams=streams,
        n_rows=n_rows,
        n_records=n_records,
        reject_counts=rejects,
        rejected_streams=rejected_streams,
    )


def cell_voltage(v_pack: float | np.ndarray, spec: VehicleSpec):
    """Pack-to-cell voltage conversion: v_pack / series cell count."""
    return v_pack / spec.cell_count


def detect_quantization(
    stream: VehicleStream,
    rel_tol: float = 1e-3,
    min_samples: int = 500,
) -> float:
    """Detect the pack-voltage sensor step, in millivolts.

    Returns the smallest positive increment consistent with the stream: the
    tolerance-GCD of the nonzero successive-difference magnitudes. Distinct
    difference magnitudes are first separated from near-zero jitter, then a
    comb score ``mean(cos(2*pi*d/s))`` is maximized over candidate steps and
    the winner is refined by a least-squares fit of the differences to
    integer multiples. Exact grids are recovered exactly; jittered grids to
    within the jitter scale.
    """
    v = stream.pack_v[np.isfinite(stream.pack_v)]
    if v.size < min_samples:
        raise QuantizationUndetectableError(
            f"{stream.spec.vehicle_id}: need >= {min_samples} samples, got {v.size}"
        )
    if np.unique(v).size < 2:
        raise QuantizationUndetectableError(
            f"{stream.spec.vehicle_id}: fewer than 2 distinct voltage levels"
        )

    d = np.abs(np.diff(v))
    # merge increments that differ only by float decoding of fixed-point values
    d = d[d > rel_tol * np.median(d[d > 0])] if np.any(d > 0) else d
    if d.size == 0:
        raise QuantizationUndetectableError(
            f"{stream.spec.vehicle_id}: no nonzero voltage increments"
        )
    if d.size > 20000:
        d = d[:: d.size // 20000 + 1]

    # split true-step increments from near-zero jitter around plateaus
    thresh = 0.25 * np.percentile(d, 90)
    for _ in range(4):
        kept = d[d > thresh]
        if kept.size == 0:
            break
        thresh = 0.45 * np.median(kept)
    dc = d[d > thresh]
    if dc.size < 2:
        dc = d

    s_hi = float(np.max(dc)) * 1.05
    s_lo = max(s_hi / 2000.0, float(np.min(dc)) * 0.45)
    n_grid = int(np.ceil(np.log(s_hi / s_lo) / np.log(1.004))) + 1
    grid = s_lo * (1.004 ** np.arange(n_grid))
    scores = np.cos(2 * np.pi * dc[None, :] / grid[:, None]).mean(axis=1)
    best = scores.max()
    # the GCD is the largest step whose comb score is near the maximum
    good = np.nonzero(scores >= best - 0.01)[0]
    s = float(grid[good[-1]])
    for _ in range(3):  # snap to the least-squares step over integer multiples
        k = np.maximum(np.round(dc / s), 1.0)
        s = float(np.sum(dc * k) / np.sum(k * k))
    return s * 1000.0
