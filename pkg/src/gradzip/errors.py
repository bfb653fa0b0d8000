"""Exception taxonomy shared by all gradzip modules.

The CLI maps these onto its exit codes: UsageError -> 1, FormatError -> 2,
everything payload-related (DataError, IntegrityError, ProtocolError) -> 3.
"""


class GradzipError(Exception):
    """Base class for all gradzip errors."""


class UsageError(GradzipError):
    """Caller violated an API precondition (bad argument, shape mismatch)."""


class FormatError(GradzipError):
    """A file or frame does not conform to its declared binary format."""


class IntegrityError(GradzipError):
    """Structurally valid container with inconsistent or corrupt contents."""


class DataError(GradzipError):
    """Payload values violate a data invariant (e.g. NaN/Inf gradients)."""


class ProtocolError(GradzipError):
    """Client/server round protocol violation (desync, wrong round order)."""
