"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes do not conform; the message names the offending axis."""


class ConfigurationError(ValueError):
    """An invalid configuration value or combination of values."""


class FormatError(ValueError):
    """A binary file is malformed; the message names the byte offset."""


class VersionError(FormatError):
    """A file or checkpoint is from an unsupported or incompatible version."""


class EvaluationError(ArithmeticError):
    """A checked numerical evaluation produced a non-finite value."""
