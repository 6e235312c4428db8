"""Exception types raised across the package."""


class GPQError(Exception):
    """Base class for every error raised by gpq."""


class ZeroVector(GPQError, ValueError):
    def __init__(self, message: str = "vector has zero norm", index: int | None = None):
        super().__init__(message)
        self.index = index


class InvalidDistribution(GPQError, ValueError):
    pass


class ShapeMismatch(GPQError, ValueError):
    pass


class IndexOutOfRange(GPQError, IndexError):
    pass


class MalformedBytes(GPQError, ValueError):
    pass


class DegenerateBatch(GPQError, ValueError):
    pass


class NonFiniteGradient(GPQError, FloatingPointError):
    pass


class TrainingDiverged(GPQError, FloatingPointError):
    pass


class EmptyDataset(GPQError, ValueError):
    pass


class InvalidConfig(GPQError, ValueError):
    pass


class InsufficientItems(GPQError, ValueError):
    pass


class InsufficientClasses(GPQError, ValueError):
    pass


class TooFewItems(GPQError, ValueError):
    pass


class UnknownId(GPQError, KeyError):
    pass


class IoError(GPQError, OSError):
    pass


class FormatError(GPQError, ValueError):
    """Base for binary file format violations."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class Truncated(FormatError):
    def __init__(self, offset: int, needed: int, available: int):
        super().__init__(
            f"file truncated at byte offset {offset}: needed {needed} bytes, {available} available"
        )
        self.offset = offset
        self.needed = needed
        self.available = available
