"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Non-finite values were produced or supplied."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class TapeError(RuntimeError):
    """Gradient-tape misuse: detached loss or repeated replay."""


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


class FormatError(ValueError):
    """Malformed external data: rasters, segment tables, checkpoints."""


class DatasetError(ValueError):
    """A dataset record failed to load or validate."""


class TrainingError(RuntimeError):
    """Training aborted; details point at the offending batch."""
