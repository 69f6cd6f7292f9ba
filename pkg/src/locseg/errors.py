"""Exception types raised across the package."""


class LocsegError(Exception):
    """Base class for rejected inputs and failed preconditions."""


class ValidationError(LocsegError, ValueError):
    pass


class ShapeError(ValidationError):
    pass
