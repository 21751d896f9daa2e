"""Exception types raised by siftsup."""

from __future__ import annotations


class SiftSupError(Exception):
    """Base class for all siftsup errors."""


class ConfigError(SiftSupError, ValueError):
    pass


class ParseError(SiftSupError, ValueError):
    """A text or binary artifact could not be parsed."""


class MalformedImage(ParseError):
    pass


class InvalidSigma(SiftSupError, ValueError):
    pass


class TooSmall(SiftSupError, ValueError):
    pass


class ImageTooSmall(SiftSupError, ValueError):
    pass


class EmptyKeypoints(SiftSupError, ValueError):
    pass


class DegenerateConfiguration(SiftSupError):
    """Every RANSAC sample was degenerate (collinear)."""


class OutOfBounds(SiftSupError, ValueError):
    pass


class LengthMismatch(SiftSupError, ValueError):
    pass


class ResolutionMismatch(SiftSupError, ValueError):
    pass


class DimMismatch(SiftSupError, ValueError):
    pass


class NoSupervisedQueries(SiftSupError, ValueError):
    pass


class InvalidPerturbation(SiftSupError, ValueError):
    pass


class IndexOutOfRange(SiftSupError, IndexError):
    pass


class MissingDirectory(SiftSupError, FileNotFoundError):
    pass
