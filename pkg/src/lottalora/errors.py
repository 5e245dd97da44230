"""Exception hierarchy shared across the library and the CLI.

Every error carries a short machine-readable ``category`` used by the CLI
to pick an exit code and emit a structured error line.
"""


class LottaError(Exception):
    category = "error"


class ConfigError(LottaError):
    """Invalid configuration value (bad preset, family parameter, ...)."""

    category = "config"


class DimensionError(LottaError):
    """Tensor shape mismatch."""

    category = "dimension"


class DataError(LottaError):
    """Invalid data fed to an operation (label out of range, missing dir)."""

    category = "data"


class ParseError(DataError):
    """Malformed binary input; carries the byte offset where parsing failed."""

    category = "parse"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FormatError(LottaError):
    """Artifact container is not in the expected format."""

    category = "format"


class IntegrityError(LottaError):
    """Artifact checksum does not match its contents."""

    category = "integrity"


class IncompatibilityError(LottaError):
    """Artifact was produced by an incompatible version or generator."""

    category = "incompatibility"


class RunError(LottaError):
    """A training run failed (e.g. diverged); carries last finite epoch."""

    category = "run"

    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch
