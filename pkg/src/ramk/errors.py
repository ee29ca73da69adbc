"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto stable exit codes: configuration problems exit
with 2, data/file problems with 3, anything unexpected with 4.
"""

from __future__ import annotations


class RamkError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RamkError):
    """Invalid configuration: bad flag values, incompatible modes, degenerate setups."""

    exit_code = 2


class DataError(RamkError):
    """Problem with input data or files (missing, malformed, inconsistent)."""

    exit_code = 3


class FormatError(DataError):
    """A file does not conform to its declared on-disk format."""


class DimensionError(DataError):
    """Descriptor/centroid dimensionality disagrees between inputs."""


class TrainingError(DataError):
    """Codebook training cannot proceed (e.g. fewer distinct points than words)."""
