"""Exception hierarchy.

Every error raised deliberately by the package derives from
:class:`OrthowalkError`, so callers (and the CLI) can map whole families of
failures onto exit codes.
"""


class OrthowalkError(Exception):
    """Base class of all package errors."""


class ConfigError(OrthowalkError, ValueError):
    """Invalid experiment configuration."""


class GeometryError(OrthowalkError, ValueError):
    """Invalid or degenerate geometric input."""


class NonPlanarLoop(GeometryError):
    pass


class DegeneratePolytope(GeometryError):
    pass


class EmptyCell(GeometryError):
    pass


class NonDivisibleSpacing(GeometryError):
    pass


class DegenerateInput(GeometryError):
    pass


class InvalidPeriod(GeometryError):
    pass


class ResolutionTooCoarse(OrthowalkError, ValueError):
    pass


class GammaOutOfRange(OrthowalkError, ValueError):
    pass


class EmptyInterior(OrthowalkError, ValueError):
    pass


class InfeasibleTheta(OrthowalkError, ValueError):
    pass


class NumericalFailure(OrthowalkError, RuntimeError):
    """Base for failures of an iterative or stochastic computation."""


class NoConvergence(NumericalFailure):
    pass


class DisconnectedComponent(OrthowalkError, ValueError):
    pass


class IsolatedVertex(OrthowalkError, ValueError):
    pass


class Truncated(NumericalFailure):
    """A walk exhausted its step budget before exiting."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
