from typing import Optional


class TruncNormError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteError(TruncNormError, ValueError):
    pass


class NotPositiveDefiniteError(TruncNormError, ValueError):
    pass


class SingularSigmaError(TruncNormError):
    pass


class IllConditionedError(TruncNormError):
    pass


class ThetaNotPdError(TruncNormError, ValueError):
    pass


class DivergentParameterError(TruncNormError, ValueError):
    pass


class SingularSampleCovarianceError(TruncNormError):
    pass


class AcceptanceTooLowError(TruncNormError):
    def __init__(self, message: str, rate: float) -> None:
        super().__init__(message)
        self.rate = rate


class InvalidSampleError(TruncNormError, ValueError):
    """Shape or support violation in sample data; row/column are 1-based."""

    def __init__(
        self, message: str, row: Optional[int] = None, column: Optional[int] = None
    ) -> None:
        super().__init__(message)
        self.row = row
        self.column = column


class InputError(TruncNormError, ValueError):
    pass
