"""Exception hierarchy for the toolkit.

Every error raised by the library derives from MemauditError so callers
(including the CLI) can separate toolkit failures from programming bugs.
"""


class MemauditError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(MemauditError):
    """A function was called with arguments that violate its contract."""


class UndefinedCorrelationError(MemauditError):
    """Correlation requested against a constant (zero-variance) input.

    Distinct from InvalidArgumentError: an undefined correlation is a
    property of the data, not of the call.
    """


class FormatError(MemauditError):
    """An on-disk file violates its format; message names the byte offset."""


class UnsupportedVersionError(FormatError):
    """A container declares a format version this toolkit does not read."""


class ManifestError(MemauditError):
    """A dataset manifest is invalid; message lists every offending entry."""


class EmptyInputError(MemauditError):
    """An operation that needs at least one valid element received none."""
