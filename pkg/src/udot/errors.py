"""Exception hierarchy shared by every module.

Each error carries an optional ``location`` (a dict such as ``{"y": 0.3, "p": 0.1}``
or ``{"x": [0.2, 0.5]}``) so that reports can say where a failure happened.
"""

from __future__ import annotations

from typing import Any


class UdotError(Exception):
    """Base class for all library errors."""

    def __init__(self, message: str, location: dict[str, Any] | None = None):
        super().__init__(message)
        self.location = dict(location or {})


# surplus
class ZeroMargin(UdotError):
    """A sampled structural margin fell below its floor."""

    def __init__(self, message: str, report: Any = None, location: dict[str, Any] | None = None):
        super().__init__(message, location)
        self.report = report


class NoPreimage(UdotError):
    pass


class NotConvex(UdotError):
    pass


# geometry / operators
class DegenerateCell(UdotError):
    pass


class TransversalityLoss(UdotError):
    pass


class EmptyLevelSet(UdotError):
    pass


class NonPositiveMass(UdotError):
    pass


class NotElliptic(UdotError):
    pass


# solver
class BracketFailure(UdotError):
    pass


class ShootingDivergence(UdotError):
    pass


class SolverAbort(UdotError):
    """The ODE march stopped early; ``partial`` holds what was computed."""

    def __init__(self, message: str, partial: Any = None, location: dict[str, Any] | None = None):
        super().__init__(message, location)
        self.partial = partial


class RejectionStall(UdotError):
    pass


class EllipticityLoss(UdotError):
    pass


# oracle
class EmptyDiscretization(UdotError):
    pass


class Unbalanced(UdotError):
    pass


class ConfigError(UdotError):
    pass
