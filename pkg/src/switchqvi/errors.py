"""Exception hierarchy shared by all modules.

Each class carries the structured payload (witness points, profiles, node
indices) that the CLI writes into its reports before mapping the failure to
an exit status.
"""

from __future__ import annotations

from typing import Any


class SwitchQVIError(Exception):
    """Base class; ``payload`` is JSON-serialisable detail for reports."""

    def __init__(self, message: str, **payload: Any):
        super().__init__(message)
        self.payload = payload


# --- configuration / parsing -------------------------------------------------
class ExpressionError(SwitchQVIError, ValueError):
    """Expression string outside the accepted grammar."""

    def __init__(self, message: str, source: str, position: int):
        caret = " " * position + "^"
        super().__init__(f"{message} at position {position}\n  {source}\n  {caret}",
                         source=source, position=position)
        self.position = position


class ConfigError(SwitchQVIError, ValueError):
    pass


# --- model validation --------------------------------------------------------
class ValidationFailed(SwitchQVIError):
    """Raised by strict validators; ``report`` holds the failing fragment."""

    def __init__(self, message: str, report=None, **payload: Any):
        super().__init__(message, **payload)
        self.report = report


class NonFreeLoopViolation(ValidationFailed):
    pass


class NegativeCost(ValidationFailed):
    pass


class TooManyModes(SwitchQVIError, ValueError):
    pass


class MonotonicityViolation(ValidationFailed):
    pass


class DiscountTooSmall(ValidationFailed):
    pass


# --- simulation --------------------------------------------------------------
class NonFiniteState(SwitchQVIError, FloatingPointError):
    pass


class CheckpointOffGrid(SwitchQVIError, ValueError):
    pass


# --- grid --------------------------------------------------------------------
class BadBounds(SwitchQVIError, ValueError):
    pass


class DimensionUnsupported(SwitchQVIError, ValueError):
    pass


class MonotonicityUnachievable(SwitchQVIError):
    pass


# --- solvers -----------------------------------------------------------------
class SolverError(SwitchQVIError):
    pass


class InnerDiverged(SolverError):
    pass


class PenaltyStalled(SolverError):
    pass


class EnvelopeOrderViolated(SolverError):
    pass


class MaxOuterIterations(SolverError):
    pass


class MonotonicityBroken(SolverError):
    pass


# --- strategies --------------------------------------------------------------
class CoupledGeneratorUnsupported(SwitchQVIError):
    pass


class MaxSwitchesExceeded(SwitchQVIError):
    pass


# --- verification ------------------------------------------------------------
class PrerequisiteOrderViolated(SwitchQVIError):
    pass


class NonConvergentRefinement(SwitchQVIError):
    pass
