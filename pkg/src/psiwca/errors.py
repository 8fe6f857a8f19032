"""Shared exception types."""


class PsiwcaError(Exception):
    pass


class InvalidInputError(PsiwcaError, ValueError):
    """Caller-supplied data violates a precondition (domain length, group mismatch, ...)."""


class ConfigurationError(PsiwcaError, ValueError):
    """Unsupported or inconsistent configuration (security parameter, group descriptor, ...)."""


class ProtocolError(PsiwcaError):
    """Protocol state violation: mismatched query ids, out-of-order messages."""


class FrameError(ProtocolError):
    """Malformed or unacceptable wire frame."""


class UnauthorizedError(ProtocolError):
    """Message origin failed authentication."""


class ClockRegressionError(PsiwcaError):
    """Epoch roll asked to move the clock backwards."""


class NonConvergenceError(PsiwcaError):
    """A numerical solver exhausted its budget; the message carries the residual bound."""


class UnstableParameterError(PsiwcaError, ValueError):
    """Queueing parameters outside the stable regime (occupancy ratio >= 1)."""
