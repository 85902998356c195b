"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and everything else to exit code 1,
so the split between "you asked for something invalid" and "the data or the
run failed" matters.
"""


class EmofuseError(Exception):
    """Base class for all package errors."""


class DimensionError(EmofuseError, ValueError):
    """Shape disagreement between tensors or modalities."""


class ParseError(EmofuseError, ValueError):
    """Malformed binary input (WAV, EMOF, checkpoint)."""


class ConfigError(EmofuseError, ValueError):
    """Invalid configuration value, flag, or file."""


class DataError(EmofuseError, ValueError):
    """Manifest or dataset content problem (missing file, bad label, ...)."""


class TrainingError(EmofuseError, RuntimeError):
    """Runtime failure during optimization (non-finite loss, absent class)."""
