"""Exception taxonomy shared across the package."""


class JointsegError(Exception):
    """Base class for all package errors."""


class FormatError(JointsegError):
    """A file is not valid NIfTI-1 or the internal container format."""


class ShapeError(JointsegError):
    """An array payload has an unexpected dimensionality or shape."""


class InputError(JointsegError, ValueError):
    """Caller passed inconsistent or out-of-contract inputs."""


class ConfigError(JointsegError, ValueError):
    """A configuration object or file failed validation."""


class DegenerateInputError(JointsegError):
    """Input is technically valid but statistically degenerate (e.g. zero variance)."""


class CoverageError(JointsegError):
    """Patch placements do not cover the requested output volume."""


class TrainingError(JointsegError):
    """Training produced non-finite losses or violated a stage contract."""


class UndefinedMetric(JointsegError):
    """A metric is undefined for the given inputs (e.g. HD95 with an empty mask).

    Callers must report the value as missing, never as 0.
    """
