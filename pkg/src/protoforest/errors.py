"""Exception hierarchy. Each class maps to one CLI exit code."""


class ProtoForestError(Exception):
    exit_code = 1

    def __init__(self, message: str, reason: str | None = None):
        super().__init__(message)
        self.reason = reason


class ParameterError(ProtoForestError, ValueError):
    """Invalid hyperparameter or conflicting option combination."""

    exit_code = 2


class DataError(ProtoForestError, ValueError):
    """Input data that cannot be ingested or evaluated."""

    exit_code = 3


class ArtifactError(ProtoForestError):
    """Corrupt, mismatched or incompatible model/matrix/prototype file."""

    exit_code = 4


class FormatVersionError(ArtifactError):
    pass
