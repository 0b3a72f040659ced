"""Exception types shared across the toolkit."""


class DewarpError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DewarpError, ValueError):
    """Tensor/image shapes are incompatible; message names the offending axis."""


class ContractError(DewarpError, ValueError):
    """An operation precondition was violated."""


class ConfigError(DewarpError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(DewarpError, ValueError):
    """A serialized file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonInvertibleWarpError(DewarpError, RuntimeError):
    """A drawn warp field failed the injectivity / inversion-residual check."""


class NumericError(DewarpError, RuntimeError):
    """A numeric failure (NaN/Inf) was detected; message names the culprit."""
