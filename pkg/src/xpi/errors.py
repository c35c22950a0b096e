"""Error types shared across the engine.

Every error that can surface from the command line carries an ``exit_code``
so the CLI can map failure classes to distinct process exit statuses.
"""


class XpiError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class EncodingOverflowError(XpiError, ValueError):
    """A value does not fit the fixed-point ring encoding."""

    exit_code = 8


class FormatError(XpiError):
    """A serialized file (weights, correlations, vectors) is malformed."""

    exit_code = 7


class HandshakeError(XpiError):
    """The two parties disagree on session parameters."""

    exit_code = 4


class CorrelationError(XpiError):
    """Dealer randomness is missing, mismatched, or already consumed."""

    exit_code = 5


class TransportError(XpiError):
    """A channel-level failure: framing, truncation, unknown frame type."""

    exit_code = 6


class TransportClosedError(TransportError):
    """The peer closed the connection at a frame boundary."""

    exit_code = 6


class DesyncError(XpiError):
    """A frame of an unexpected type arrived: the parties lost step."""

    exit_code = 9


class AbortError(XpiError):
    """The peer aborted the session and sent a reason."""

    exit_code = 10
