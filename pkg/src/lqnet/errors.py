"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes: format/IO problems exit 2,
shape/contract violations exit 3, dataset mismatches exit 4, anything
else exit 5.
"""


class LqnetError(Exception):
    """Base class for all package errors."""


class InputDomainError(LqnetError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ContractError(LqnetError, ValueError):
    """A caller violated an operation's precondition (shapes, lengths)."""


class FormatError(LqnetError, ValueError):
    """A serialized container is malformed."""


class BadMagicError(FormatError):
    """Stream does not start with the expected magic bytes."""


class VersionError(FormatError):
    """Container version is not supported."""


class TruncatedError(FormatError):
    """Stream ended before the declared payload was complete."""


class DataMismatchError(LqnetError, ValueError):
    """Dataset components disagree (e.g. image/label counts differ)."""
