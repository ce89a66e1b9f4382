#core.py

"""
Domain types shared by every module.

All coordinates are expressed in prediction-grid units: pixel ``i`` of a
``h x w`` grid sits at ``(row, col) = (i // w, i % w)``. Instances are
immutable once built; the numpy buffers they hold are marked read-only.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import (
    DataError,
    IndexOutOfRangeError,
    InvariantError,
    NumericError,
    PointFileError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

EPS = 1e-6
NONE = -1


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def clamp_probabilities(values) -> np.ndarray:
    """Clamp probabilities into ``[EPS, 1 - EPS]``; idempotent."""
    return np.clip(np.asarray(values, dtype=np.float64), EPS, 1.0 - EPS)


def pixel_coords(i: int, w: int, h: int) -> Tuple[float, float]:
    """Return the (row, col) coordinates of flattened pixel ``i`` on an ``h x w`` grid."""
    if w <= 0 or h <= 0:
        raise IndexOutOfRangeError(f"grid must be non-empty, got {h}x{w}")
    if not 0 <= i < h * w:
        raise IndexOutOfRangeError(f"pixel index {i} outside [0, {h * w})")
    return float(i // w), float(i % w)


def grid_coords(h: int, w: int) -> np.ndarray:
    """n x 2 array of pixel coordinates in row-major order."""
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.stack([rows, cols], axis=1).astype(np.float64)


@dataclass(frozen=True)
class ScoreMap:
    """Flattened per-pixel foreground probabilities on an ``h x w`` grid."""

    values: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.height <= 0 or self.width <= 0:
            raise ShapeMismatchError(f"grid must be positive, got {self.height}x{self.width}")
        if values.size != self.height * self.width:
            raise ShapeMismatchError(
                f"score map has {values.size} values, expected {self.height}x{self.width}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("score map contains non-finite values")
        object.__setattr__(self, "values", _frozen(clamp_probabilities(values)))

    @classmethod
    def from_logits(cls, logits, height: int, width: int) -> "ScoreMap":
        return cls(expit(np.asarray(logits, dtype=np.float64)), height, width)

    @classmethod
    def uniform(cls, value: float, height: int, width: int) -> "ScoreMap":
        return cls(np.full(height * width, value, dtype=np.float64), height, width)

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)

    @property
    def coords(self) -> np.ndarray:
        return grid_coords(self.height, self.width)


@dataclass(frozen=True)
class PointAnnotation:
    """``m`` point locations, one (row, col) pair per row."""

    coords: np.ndarray
    stride: int = 1

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.size == 0:
            coords = coords.reshape(0, 2)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeMismatchError(f"point coordinates must be m x 2, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise PointFileError("point coordinates must be finite")
        if self.stride < 1:
            raise DataError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "coords", _frozen(coords.copy()))

    @classmethod
    def empty(cls) -> "PointAnnotation":
        return cls(np.zeros((0, 2)))

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    def __len__(self) -> int:
        return self.m

    def within(self, height: int, width: int) -> "PointAnnotation":
        """Reject negative or out-of-grid coordinates; returns ``self``."""
        rows, cols = self.coords[:, 0], self.coords[:, 1]
        bad = np.flatnonzero((rows < 0) | (cols < 0) | (rows >= height) | (cols >= width))
        if bad.size:
            raise PointFileError(
                f"points {bad.tolist()} fall outside the {height}x{width} grid"
            )
        return self

    def flipped(self, width: int) -> "PointAnnotation":
        coords = self.coords.copy()
        coords[:, 1] = (width - 1) - coords[:, 1]
        return PointAnnotation(coords, stride=self.stride)


@dataclass(frozen=True)
class MatchMatrix:
    """
    Sparse binary ``n x m`` matrix whose rows are all-zero or one-hot.

    ``row_assignment[i]`` holds the column of the single 1 in row ``i`` or
    ``NONE`` for an all-zero row.
    """

    row_assignment: np.ndarray
    m: int

    def __post_init__(self):
        assignment = np.asarray(self.row_assignment, dtype=np.int64).reshape(-1)
        if self.m < 0:
            raise ShapeMismatchError(f"column count must be >= 0, got {self.m}")
        bad = (assignment != NONE) & ((assignment < 0) | (assignment >= self.m))
        if np.any(bad):
            raise InvariantError(
                f"row assignment entries outside NONE or [0, {self.m}): rows {np.flatnonzero(bad).tolist()}"
            )
        object.__setattr__(self, "row_assignment", _frozen(assignment.copy()))

    @classmethod
    def empty(cls, n: int, m: int = 0) -> "MatchMatrix":
        return cls(np.full(n, NONE, dtype=np.int64), m)

    @classmethod
    def from_pairs(cls, n: int, m: int, rows, cols) -> "MatchMatrix":
        assignment = np.full(n, NONE, dtype=np.int64)
        assignment[np.asarray(rows, dtype=np.int64)] = np.asarray(cols, dtype=np.int64)
        return cls(assignment, m)

    @classmethod
    def from_dense(cls, dense) -> "MatchMatrix":
        dense = np.asarray(dense)
        if dense.ndim != 2:
            raise ShapeMismatchError(f"dense match matrix must be 2-D, got {dense.ndim}-D")
        if not np.all((dense == 0) | (dense == 1)):
            raise InvariantError("dense match matrix is not binary")
        if np.any(dense.sum(axis=1) > 1):
            raise InvariantError("dense match matrix has rows with more than one entry")
        if dense.shape[1] == 0:
            return cls.empty(dense.shape[0], 0)
        assignment = np.where(dense.any(axis=1), dense.argmax(axis=1), NONE)
        return cls(assignment, dense.shape[1])

    @property
    def n(self) -> int:
        return self.row_assignment.size

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n, self.m

    def matched_rows(self) -> np.ndarray:
        return np.flatnonzero(self.row_assignment != NONE)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.m), dtype=np.float64)
        rows = self.matched_rows()
        dense[rows, self.row_assignment[rows]] = 1.0
        return dense

    def dot(self, vector) -> np.ndarray:
        """M @ vector for a length-m vector."""
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vector.size != self.m:
            raise ShapeMismatchError(f"vector has length {vector.size}, match matrix has {self.m} columns")
        out = np.zeros(self.n, dtype=np.float64)
        rows = self.matched_rows()
        out[rows] = vector[self.row_assignment[rows]]
        return out

    def ones(self) -> np.ndarray:
        """M @ 1, the indicator of matched rows."""
        return (self.row_assignment != NONE).astype(np.float64)

    def column_counts(self) -> np.ndarray:
        rows = self.matched_rows()
        return np.bincount(self.row_assignment[rows], minlength=self.m)

    def rows_of(self, column: int) -> np.ndarray:
        return np.flatnonzero(self.row_assignment == column)

    def triplets(self) -> Iterator[Tuple[int, int, int]]:
        for row in self.matched_rows():
            yield int(row), int(self.row_assignment[row]), 1


@dataclass(frozen=True)
class ConfidenceMask:
    """Diagonal of the confidence matrix Z, entries in {0, 1}."""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not np.all((weights == 0.0) | (weights == 1.0)):
            raise InvariantError("confidence weights must be 0 or 1")
        object.__setattr__(self, "weights", _frozen(weights.copy()))

    @classmethod
    def ones(cls, n: int) -> "ConfidenceMask":
        return cls(np.ones(n))

    @classmethod
    def zeros(cls, n: int) -> "ConfidenceMask":
        return cls(np.zeros(n))

    @property
    def n(self) -> int:
        return self.weights.size

    def masked(self, validity) -> "ConfidenceMask":
        """Apply a multiplicative {0,1} validity mask (cutout regions)."""
        validity = np.asarray(validity, dtype=np.float64).reshape(-1)
        if validity.size != self.n:
            raise ShapeMismatchError(f"validity mask has length {validity.size}, expected {self.n}")
        return ConfidenceMask(self.weights * validity)


@dataclass(frozen=True)
class FeatureMap:
    """``c x h x w`` feature grid, row-major."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeMismatchError(f"feature map must be c x h x w, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericError("feature map contains non-finite values")
        object.__setattr__(self, "data", _frozen(np.ascontiguousarray(data)))

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "FeatureMap":
        return cls(np.zeros((channels, height, width)))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n(self) -> int:
        return self.height * self.width

    def flipped(self) -> "FeatureMap":
        return FeatureMap(self.data[:, :, ::-1].copy())
