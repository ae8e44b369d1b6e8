"""Exception types raised across the package."""


class ShapeFormerError(Exception):
    """Base class for all package errors."""


class ChecksumError(ShapeFormerError, ValueError):
    pass


class DimensionMismatch(ShapeFormerError, ValueError):
    pass


class ContainmentError(ShapeFormerError, ValueError):
    pass


class BoxOutOfBounds(ShapeFormerError, ValueError):
    pass


class DegenerateShape(ShapeFormerError, ValueError):
    pass


class GenerationExhausted(ShapeFormerError, RuntimeError):
    pass


class FormatVersionMismatch(ShapeFormerError, ValueError):
    pass


class ParseError(ShapeFormerError, ValueError):
    pass


class ShapeError(ShapeFormerError, ValueError):
    pass


class NonFiniteGradient(ShapeFormerError, FloatingPointError):
    pass


class NonFiniteLoss(ShapeFormerError, FloatingPointError):
    pass


class UnknownCategory(ShapeFormerError, KeyError):
    pass


class EmptySplit(ShapeFormerError, ValueError):
    pass


class MissingArtifact(ShapeFormerError, FileNotFoundError):
    pass


class UsageError(ShapeFormerError):
    pass
