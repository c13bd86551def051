"""Exception types shared across the pipeline.

CLI exit-code mapping: ConfigError -> 2, MissingArtifactError -> 3,
NumericalFailure -> 4, anything else -> 1.
"""


class CTForecastError(Exception):
    """Base class for all package errors."""


class ConfigError(CTForecastError):
    """Invalid or inconsistent configuration."""


class VolumeParseError(CTForecastError):
    """Corrupt or truncated on-disk volume (header or payload)."""


class CohortValidationError(CTForecastError):
    """Manifest violates a structural invariant; message names the patient."""


class MissingArtifactError(CTForecastError):
    """An upstream pipeline stage has not produced its output yet."""


class EmptyMaskError(CTForecastError):
    """A masked reduction was requested over an all-zero mask."""


class UnsupportedOperationError(CTForecastError):
    """Operation not defined for this cohort provenance."""


class StatsMismatchError(CTForecastError):
    """Volume was preprocessed with different normalization statistics
    than the ones frozen into the checkpoint."""


class NumericalFailure(CTForecastError):
    """Non-finite loss or activation during training; carries diagnostics."""


class UnsupportedLayerError(CTForecastError):
    """Model profiler met a parameterized layer type it cannot count."""
