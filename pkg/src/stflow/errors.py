"""Exception hierarchy.  Each family maps to one CLI exit code."""


class StflowError(Exception):
    exit_code = 2


class ConfigError(StflowError):
    """Malformed or unknown configuration."""

    exit_code = 1


class ParameterError(ValueError, StflowError):
    """An argument outside its valid domain."""

    exit_code = 1


class DataError(StflowError):
    exit_code = 2


class IngestError(DataError):
    """The trip stream itself cannot be read (missing header, bad encoding)."""


class ConsistencyError(DataError):
    """Inputs disagree with each other, e.g. a trip naming an unregistered station."""


class ArtifactVersionError(DataError):
    """An artifact file carries an unknown magic string or version."""


class FingerprintMismatchError(DataError):
    """A checkpoint was trained against a different station ordering."""


class ShapeError(ValueError, StflowError):
    exit_code = 2


class NumericalError(StflowError):
    """Training produced a non-finite loss."""

    exit_code = 3
