"""Manufacturer-independent EV battery health audit from charging telemetry."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .telemetry import (
    IngestResult,
    TelemetryRecord,
    VehicleSpec,
    VehicleStream,
    cell_voltage,
    detect_quantization,
    ingest_stream,
    load_specs,
)

__all__ = [
    "__version__",
    "RunConfig",
    "load_config",
    "IngestResult",
    "TelemetryRecord",
    "VehicleSpec",
    "VehicleStream",
    "cell_voltage",
    "detect_quantization",
    "ingest_stream",
    "load_specs",
]
