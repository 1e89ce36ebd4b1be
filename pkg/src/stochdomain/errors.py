"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StochDomainError(Exception):
    """Base class for all package errors."""


class ParameterError(StochDomainError, ValueError):
    """An argument is outside the admissible range."""


class DegenerateMapError(StochDomainError):
    """The domain map is singular or the remapped coefficient is not SPD."""


class AssumptionViolatedError(StochDomainError):
    """The uniform invertibility margin of the deformation is not positive."""


class SolverError(StochDomainError):
    """A linear solve failed to reach the requested tolerance."""


class ContractError(StochDomainError):
    """Samples do not cover every node of a sparse grid."""


class InfeasibleRegionError(StochDomainError):
    """The analyticity radius is too large for the requested constants."""


class ConfigError(StochDomainError):
    """An experiment configuration could not be parsed or validated."""
