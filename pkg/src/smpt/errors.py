"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rules."""


class NumericsError(RuntimeError):
    """Non-finite values showed up where finite ones are required."""


class MissingGradError(RuntimeError):
    """An optimizer step was asked for a parameter with no gradient."""


class FormatError(ValueError):
    """A binary file is not a valid dataset or checkpoint."""


class ConfigError(ValueError):
    """A config file or flag set could not be parsed or validated."""


class SceneError(RuntimeError):
    """Scene generation could not produce a feasible layout."""


class MaskingError(ValueError):
    """A mask request cannot be satisfied for the given layout."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss and was aborted."""
