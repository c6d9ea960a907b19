"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class BTAError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(BTAError, ValueError):
    """Block dimensions are inconsistent with the declared (n, b, a)."""


class AsymmetryDetected(BTAError, ValueError):
    """A block that must be symmetric fails the transpose check."""


class InvalidDensity(BTAError, ValueError):
    """Requested in-block density lies outside (0, 1]."""


class BadMagic(BTAError, ValueError):
    """Container file does not start with the expected magic bytes."""


class TruncatedFile(BTAError, ValueError):
    """Container file ends before the declared payload is complete."""


class UnsupportedVersion(BTAError, ValueError):
    """Container file declares a format version this reader cannot parse."""


class NotPositiveDefinite(BTAError, ArithmeticError):
    """A Cholesky pivot was not strictly positive.

    Parameters
    ----------
    message : str
        Human readable description.
    pivot : int, optional
        Zero-based index of the failing pivot inside the block.
    block : int, optional
        Index of the diagonal block being factorized, when known.
    """

    def __init__(self, message: str, pivot: int | None = None, block: int | None = None):
        super().__init__(message)
        self.pivot = pivot
        self.block = block


class SingularTriangular(BTAError, ArithmeticError):
    """A triangular block has a zero on its diagonal."""


class TooFewBlocks(BTAError, ValueError):
    """The matrix has too few diagonal blocks for the requested rank count."""


class NestedInfeasible(BTAError, ValueError):
    """Nested reduced-system solving cannot run with the given sizes."""


class InfeasibleParameters(BTAError, ValueError):
    """Cost-model parameters describe an impossible configuration."""


class TransportFailure(BTAError, RuntimeError):
    """A collective could not complete (peer failure or timeout)."""
