class RmstNmaError(ValueError):
    """Base class for input and estimation errors raised by this package."""


class CensoringWeightError(RmstNmaError):
    pass


class RankDeficientError(RmstNmaError):
    pass


class ArmUnidentifiableError(RmstNmaError):
    pass


class InsufficientSampleError(RmstNmaError):
    pass


class DataFormatError(RmstNmaError):
    """Malformed input file; ``line`` is 1-based and counts the header."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
