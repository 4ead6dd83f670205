"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration and usage problems
exit 1, data/schema/graph problems exit 2, numeric failures exit 3.
"""


class AttnPathError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AttnPathError):
    """Invalid configuration value or argument combination."""


class ShapeError(AttnPathError):
    """Tensor shapes incompatible with the requested operation."""


class ValidationError(AttnPathError):
    """A value-level contract was violated (e.g. rows not a distribution)."""


class NumericError(AttnPathError):
    """NaN/Inf encountered, or an optimization diverged."""


class SchemaError(AttnPathError):
    """Group schema inconsistent with itself or with the data."""


class DataError(AttnPathError):
    """A data file is missing, malformed, or unparseable."""


class NoPathError(AttnPathError):
    """The attention graph has no start-to-end path left."""


class AlignmentError(AttnPathError):
    """Explanation sets do not cover the same samples."""
