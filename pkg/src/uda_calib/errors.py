"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, and detected NaN/Inf exit 4.
"""

from __future__ import annotations


class UdaCalibError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(UdaCalibError):
    """Invalid configuration value, unknown config key, or bad hyper-parameter."""


class ValidationError(UdaCalibError):
    """Runtime input violates a precondition (bad labels, empty batch, ...)."""


class DomainError(ValidationError):
    """Argument outside the mathematical domain of an operation."""


class DimensionError(UdaCalibError):
    """Shape mismatch between arrays; the message names both shapes."""


class StateError(UdaCalibError):
    """Operation called in the wrong order (e.g. backward without a forward)."""


class FormatError(UdaCalibError):
    """Malformed binary or text data encountered while parsing a file."""


class NumericalError(UdaCalibError):
    """A NaN or Inf appeared where the contract requires finite values."""
