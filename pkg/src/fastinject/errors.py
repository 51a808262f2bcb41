"""Typed exceptions shared across the package.

The CLI maps these onto its exit-code contract: usage/configuration
problems exit 2, data problems exit 3, numeric failures exit 4.
"""


class FastInjectError(Exception):
    """Base class for all package errors."""


class ShapeError(FastInjectError, ValueError):
    """Operands have incompatible shapes; message names both shapes."""


class NumericError(FastInjectError, ArithmeticError):
    """Non-finite values where finite numbers are required."""


class ConfigError(FastInjectError, ValueError):
    """Invalid configuration value or unusable config file."""


class DataError(FastInjectError, ValueError):
    """Corpus or data file is malformed, missing, or inconsistent."""


class OovError(DataError):
    """A word has no lexicon entry; message names the word."""


class InfeasibleTargetError(FastInjectError, ValueError):
    """Label sequence cannot be aligned within the available frames.

    Distinct from numeric failure: the alignment lattice is empty, so the
    loss would be +inf for structural reasons, not through underflow.
    """
