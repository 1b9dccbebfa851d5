"""Exception hierarchy shared by every module in the package.

Each command maps these onto process exit codes, and the session service
maps them onto wire error codes, so new exception types should subclass
one of the families below instead of Exception.
"""


class IcforgeError(Exception):
    """Base class for all package errors."""


class ValidationError(IcforgeError):
    """Caller-supplied values violate a documented precondition."""


class DimensionError(ValidationError):
    """Array arguments have incompatible or unsupported shapes."""


class ContractError(IcforgeError):
    """An internal API was used outside its contract (programming error)."""


class NumericError(IcforgeError):
    """A numeric quantity became non-finite or otherwise unusable."""


class ParseError(IcforgeError):
    """Structured text could not be parsed (bboxes, decisions, replies)."""


class ProtocolError(IcforgeError):
    """A session operation arrived in a state that does not allow it."""


class BackendError(IcforgeError):
    """A model or agent backend failed to produce a usable result."""


class SamplingError(IcforgeError):
    """Rejection sampling exhausted its retry budget."""


class NotFoundError(IcforgeError):
    """An agent search came up empty (no inconsistency, match, or tag)."""
