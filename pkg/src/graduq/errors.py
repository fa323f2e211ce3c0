"""Exception taxonomy shared by all modules.

The CLI maps these to exit codes: domain/config/shape/format/experiment
errors exit 1, I/O problems exit 2.
"""


class GraduqError(Exception):
    """Base class for all package errors."""


class ShapeError(GraduqError):
    """Tensor or parameter shapes are incompatible with an operation."""


class DomainError(GraduqError):
    """An argument value is outside the operation's domain."""


class ConfigError(GraduqError):
    """A configuration is inconsistent or contains unknown keys."""


class FormatError(GraduqError):
    """A serialized artifact (model file, IDX, CSV) is malformed."""


class ExperimentError(GraduqError):
    """An experiment precondition failed (untrained model, exhausted pool)."""
