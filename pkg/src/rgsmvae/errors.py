"""Exception hierarchy shared by every module."""


class RgsmVaeError(Exception):
    """Base class for all package errors."""


class DimensionError(RgsmVaeError, ValueError):
    """Operand shapes do not satisfy an op's shape rule."""


class DomainError(RgsmVaeError, ValueError):
    """A numerical input lies outside an op's domain (non-finite, log of <= 0, ...)."""


class ContractError(RgsmVaeError, RuntimeError):
    """A precondition of an API call was violated."""


class FormatError(RgsmVaeError, ValueError):
    """A binary file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass
