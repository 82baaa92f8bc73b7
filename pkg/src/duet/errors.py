"""Exception hierarchy shared by all modules."""


class DuetError(Exception):
    """Base class for every error raised by this package."""


class DataError(DuetError):
    """Problems with input data (exit code 3 at the command line)."""


class ParseError(DataError):
    def __init__(self, row: int, col: int, value: str = ""):
        self.row = row
        self.col = col
        self.value = value
        super().__init__(f"non-numeric cell {value!r} at row {row}, column {col}")


class EmptyDataset(DataError):
    pass


class InvalidSplit(DataError):
    pass


class NoWindows(DataError):
    pass


class ShapeMismatch(DuetError, ValueError):
    pass


class ConfigError(DuetError, ValueError):
    """Invalid hyperparameters (exit code 2 at the command line)."""


class InvalidK(ConfigError):
    pass


class InvalidKernel(ConfigError):
    pass


class UnknownExtractor(DuetError, IndexError):
    pass


class SeriesTooShort(DuetError, ValueError):
    pass


class AsymmetricDistance(DuetError, ValueError):
    pass


class DeadRow(DuetError, ValueError):
    pass


class EmptySet(DuetError, ValueError):
    pass


class DivergenceError(DuetError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite training loss {loss} at step {step}")


class ConfigMismatch(DataError):
    pass


class CorruptCheckpoint(DuetError):
    pass


class NonDeterministicLoss(DuetError):
    pass


class InvalidSpec(ConfigError):
    pass


class WindowOutOfRange(DataError, IndexError):
    pass
