"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
FormatError/DimensionError -> 3, NumericalError -> 4.
"""


class SplatmemError(Exception):
    """Base class for all package errors."""


class ConfigError(SplatmemError):
    """Invalid configuration: unknown keys, bad values, missing inputs."""


class FormatError(SplatmemError):
    """Malformed or truncated binary file, wrong magic or version."""


class DimensionError(FormatError):
    """Payload size inconsistent with the declared header dimensions."""


class NumericalError(SplatmemError):
    """Non-finite values where finite ones are required (diverged loss etc)."""
