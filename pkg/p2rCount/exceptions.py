#exceptions.py

from typing import Any, Dict, List, Optional, Sequence


class P2RError(Exception):
    """Base exception for every error raised by the p2rCount package"""

    code = "E_P2R"
    exit_code = 1

    def __str__(self) -> str:
        return super().__str__() or self.__class__.__name__

    def one_line(self) -> str:
        """Machine-parsable single line used by the CLI on stderr."""
        message = " ".join(str(self).split())
        return f"{self.code}: {message}"


class UsageError(P2RError):
    """Invalid option combination or out-of-range hyperparameter."""

    code = "E_USAGE"
    exit_code = 2


class DataError(P2RError):
    """Malformed or inconsistent input data."""

    code = "E_DATA"
    exit_code = 3


class TensorFormatError(DataError):
    pass


class BadMagicError(TensorFormatError):
    pass


class BadDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    def __init__(self, path: str, expected: int, actual: int):
        super().__init__(
            f"truncated payload in {path}: expected {expected} bytes, got {actual}"
        )
        self.expected = expected
        self.actual = actual


class PointFileError(DataError):
    pass


class IndexOutOfRangeError(DataError, IndexError):
    pass


class ShapeMismatchError(DataError):
    pass


class DatasetError(DataError):
    pass


class UnmatchedPointError(DataError):
    """Raised when a point has no admissible pixel in its region."""

    def __init__(self, point_indices: Sequence[int], mu: Optional[float] = None):
        indices = [int(j) for j in point_indices]
        radius = f" with mu={mu:g}" if mu is not None else ""
        super().__init__(f"points without admissible pixels{radius}: {indices}")
        self.point_indices = indices


class AssignmentError(P2RError):
    code = "E_ASSIGN"
    exit_code = 3


class NumericError(P2RError):
    code = "E_NUMERIC"
    exit_code = 4


class NanLossError(NumericError):
    """
    Training hit a non-finite loss, gradient or parameter. ``record`` names the
    epoch, step and offending terms; ``records`` and ``snapshots`` hold what the
    run completed before it stopped.
    """

    def __init__(self, message: str, record: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.record = record or {}
        self.records: List[Dict[str, Any]] = []
        self.snapshots: Dict[int, Any] = {}


class InvariantError(NumericError):
    pass
