"""Exception hierarchy shared by all modules."""


class SemiFLError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(SemiFLError, ValueError):
    """Shapes, names or layouts do not line up."""


class DegenerateBatchError(SemiFLError, ValueError):
    """Batch statistics are undefined for the given batch."""


class NumericError(SemiFLError, ArithmeticError):
    def __init__(self, layer: str, message: str = "non-finite values"):
        super().__init__(f"{message} in layer {layer!r}")
        self.layer = layer


class DegenerateStatisticsError(SemiFLError, ValueError):
    """Normalization statistics requested over zero samples."""


class ConfigError(SemiFLError, ValueError):
    pass


class FormatError(SemiFLError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PartitionError(SemiFLError, ValueError):
    pass


class ScheduleError(SemiFLError, ValueError):
    pass


class ProtocolError(SemiFLError):
    """A module error raised inside a client's work, tagged with where it happened."""

    def __init__(self, round_: int, client: int, cause: Exception):
        super().__init__(f"round {round_}, client {client}: {type(cause).__name__}: {cause}")
        self.round = round_
        self.client = client
        self.cause = cause
