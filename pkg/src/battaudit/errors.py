"""Exception hierarchy shared across the pipeline.

Exit-code mapping used by the CLI: SchemaError -> 2,
InsufficientDataError -> 3, ConfigError -> 4.
"""


class BattAuditError(Exception):
    """Base class for all pipeline errors."""


class SchemaError(BattAuditError):
    """Input file violates the telemetry/spec data contract."""


class InsufficientDataError(BattAuditError):
    """Not enough qualifying data to run the requested analysis."""


class QuantizationUndetectableError(InsufficientDataError):
    """Voltage trace has too few distinct levels to infer the sensor step."""


class ConfigError(BattAuditError):
    """Invalid or inconsistent run configuration."""


class GenerationError(BattAuditError):
    """Synthetic-fleet scenario is infeasible as specified."""
