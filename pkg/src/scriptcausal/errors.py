"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataFormatError -> 2,
NumericalError -> 3.
"""


class ScriptCausalError(Exception):
    """Base class for all package errors."""


class ConfigError(ScriptCausalError):
    """Invalid configuration, arguments, or preconditions."""


class DataFormatError(ScriptCausalError):
    """Malformed input file or serialized artifact."""


class NumericalError(ScriptCausalError):
    """Non-finite values or other numerical failure."""
