"""Exception types shared across the codec."""


class CodecError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(CodecError, ValueError):
    """Invalid shapes, frame types, GOP parameters or flag combinations."""


class UsageError(CodecError, RuntimeError):
    """An API was called in the wrong order (e.g. backward before forward)."""


class DecodeError(CodecError):
    """Malformed, truncated or inconsistent bitstream."""

    def __init__(self, message: str, frame_index: int | None = None):
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)
        self.frame_index = frame_index


class EncodeError(CodecError, RuntimeError):
    """Optimization failed (non-finite loss, unrecoverable divergence)."""
