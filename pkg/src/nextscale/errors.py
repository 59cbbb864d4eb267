"""Error taxonomy shared across the package.

Every failure surfaced to a caller falls in one of five buckets so the
command line can map exceptions to exit codes and a machine readable
error line without string matching.
"""


class NextScaleError(Exception):
    """Base class for all package errors."""

    code = "error"


class ConfigurationError(NextScaleError):
    """A config value is invalid or two config values are inconsistent."""

    code = "config"


class UsageError(NextScaleError):
    """The caller invoked an interface incorrectly (bad path, bad flag)."""

    code = "usage"


class InvariantViolation(NextScaleError):
    """An internal contract that should hold by construction was broken."""

    code = "invariant"


class IntegrityError(NextScaleError):
    """Stored data failed validation (truncation, checksum, version)."""

    code = "integrity"


class UnsupportedError(NextScaleError):
    """A recognized but deliberately out-of-scope combination was requested."""

    code = "unsupported"
