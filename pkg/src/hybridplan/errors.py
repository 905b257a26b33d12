"""Exception types shared across the package.

The CLI maps these onto exit codes (configuration/usage -> 1, data -> 2,
numeric -> 3); library code raises them directly.
"""


class HybridPlanError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HybridPlanError):
    """Invalid configuration value (bad template tag, lr <= 0, window <= 0, ...)."""


class DataError(HybridPlanError):
    """Invalid input data (non-finite states, malformed files, bad labels)."""


class ParseError(DataError):
    """Malformed scenario/config/checkpoint file; message carries line context."""


class ShapeError(HybridPlanError):
    """Tensor shape mismatch; message names both shapes."""


class NumericError(HybridPlanError):
    """Non-finite value produced by an operation; message names the op."""


class ContractError(HybridPlanError):
    """A documented precondition/invariant was violated by the caller."""


class SolverError(HybridPlanError):
    """Gauss-Newton normal equations unsolvable even after damping."""


class ProjectionError(ContractError):
    """Point lies outside the reference-route corridor."""
