"""Exception hierarchy shared by all modules.

Each family carries the process exit code the CLI maps it to.
"""


class AcdisError(Exception):
    exit_code = 1


class ConfigError(AcdisError, ValueError):
    exit_code = 2


class DataError(AcdisError):
    exit_code = 3


class FormatError(DataError, ValueError):
    """Malformed volume container. ``field`` names the offending entry."""

    def __init__(self, message, field=None, path=None):
        super().__init__(message)
        self.field = field
        self.path = path


class ShapeError(DataError, ValueError):
    pass


class ProtocolError(AcdisError, ValueError):
    """Violation of the missing-modality protocol (empty mask, wrong head count, masked teacher)."""

    exit_code = 3


class NumericalError(AcdisError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})


class VerificationError(AcdisError):
    exit_code = 5
