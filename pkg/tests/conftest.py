import numpy as np
import pytest

from battaudit.config import RunConfig
from battaudit.telemetry import VehicleSpec, VehicleStream

DEFAULT_SPEC = VehicleSpec("veh-1", "EGMP", "ev6", 192, 77.4, 97.5)


def make_stream(
    t=None,
    pack_v=None,
    pack_a=None,
    soc=None,
    temp_c=None,
    sac_ah=None,
    mileage_km=None,
    chg_state=None,
    cell_v=None,
    spec=DEFAULT_SPEC,
    n=None,
):
    """Hand-built stream with sensible fill-ins for unspecified channels."""
    if t is None:
        t = np.arange(n, dtype=float)
    t = np.asarray(t, dtype=float)
    n = len(t)

    def _arr(x, default):
        if x is None:
            return np.full(n, default, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.full(n, x, dtype=float) if x.ndim == 0 else x

    pack_a = _arr(pack_a, 0.0)
    if sac_ah is None:
        dt = np.diff(t)
        pos = np.clip(pack_a, 0.0, None)
        sac_ah = 1000.0 + np.concatenate([[0.0], np.cumsum(0.5 * (pos[1:] + pos[:-1]) * dt)]) / 3600.0
    return VehicleStream(
        spec=spec,
        t=t,
        pack_v=_arr(pack_v, 700.0),
        pack_a=pack_a,
        soc=_arr(soc, 50.0),
        temp_c=_arr(temp_c, 22.0),
        sac_ah=np.asarray(sac_ah, dtype=float),
        mileage_km=_arr(mileage_km, 12000.0),
        chg_state=np.asarray(
            chg_state if chg_state is not None else np.zeros(n), dtype=np.int8
        ),
        cell_v=cell_v,
    )


def charge_ramp_stream(
    duration_s=3600.0,
    dt=1.0,
    current_a=10.0,
    v0=3.55,
    v1=3.80,
    cell_count=192,
    quant_mv=97.5,
    temp_c=22.0,
    flag=1,
    spec=None,
):
    """Slow CC charge with a linear cell-voltage ramp on the sensor grid."""
    spec = spec or VehicleSpec("veh-1", "EGMP", "ev6", cell_count, 77.4, quant_mv)
    t = np.arange(0.0, duration_s, dt)
    v_cell = v0 + (v1 - v0) * t / duration_s
    step = quant_mv / 1000.0
    pack = np.round(v_cell * cell_count / step) * step
    soc = 10.0 + 80.0 * t / duration_s
    return make_stream(
        t=t,
        pack_v=pack,
        pack_a=np.full(len(t), float(current_a)),
        soc=soc,
        temp_c=temp_c,
        chg_state=np.full(len(t), flag, dtype=np.int8),
        spec=spec,
    )


@pytest.fixture(scope="session")
def cfg():
    return RunConfig()
