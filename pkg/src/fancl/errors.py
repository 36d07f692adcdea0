"""Exception hierarchy shared by every fancl module."""


class FanclError(Exception):
    """Base class for all library errors."""


class ShapeError(FanclError, ValueError):
    """Incompatible tensor extents."""


class NumericError(FanclError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class ContractError(FanclError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(FanclError, ValueError):
    """An out-of-range configuration value."""


class FormatError(FanclError, ValueError):
    """Malformed tensor or checkpoint file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class KinkError(FanclError):
    """Gradient check point lies too close to a non-differentiable kink."""
