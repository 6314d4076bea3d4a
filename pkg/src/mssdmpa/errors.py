"""Exception types shared across the package.

Each error family maps to a distinct CLI exit code so scripted callers can
tell configuration problems from data problems from numerical failures.
"""


class ShapeError(ValueError):
    """An operand has extents incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(ValueError):
    """A dataset or artifact on disk cannot be used."""


class MissingFileError(DataError):
    """A required input file does not exist."""


class ExtentMismatchError(DataError):
    """Paired image/mask files disagree on spatial extents."""


class BitDepthError(DataError):
    """An input image is not 8-bit."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt or has an unsupported version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
