#utils.py

import csv
import hashlib
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

from .core import FeatureMap, PointAnnotation, ScoreMap
from .exceptions import (
    BadDtypeError,
    BadMagicError,
    DatasetError,
    PointFileError,
    ShapeMismatchError,
    TensorFormatError,
    TruncatedPayloadError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

MAGIC = b"P2RT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_PREAMBLE = struct.Struct("<4sIBI")

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(level: Union[int, str] = "INFO", quiet: bool = False) -> None:
    """Configure the root logger once; later calls only change the level."""
    if isinstance(level, str):
        level = level.upper()
    if quiet:
        level = logging.WARNING
    root = logging.getLogger()
    if not any(isinstance(h, RichHandler) for h in root.handlers):
        handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logging.basicConfig(level=level, format=LOG_FORMAT, handlers=[handler])
    root.setLevel(level)


# --- TensorFile ---------------------------------------------------------------

def _encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in DTYPE_CODES:
        array = array.astype(np.float64)
    code = DTYPE_CODES[array.dtype]
    header = _PREAMBLE.pack(MAGIC, VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def _decode(raw: bytes, path: str) -> np.ndarray:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _PREAMBLE.size:
        raise TruncatedPayloadError(path, _PREAMBLE.size, len(raw))
    _, version, code, ndim = _PREAMBLE.unpack_from(raw)
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in DTYPES:
        raise BadDtypeError(f"{path}: unknown dtype code {code}")
    dims_end = _PREAMBLE.size + 4 * ndim
    if len(raw) < dims_end:
        raise TruncatedPayloadError(path, dims_end, len(raw))
    shape = struct.unpack_from(f"<{ndim}I", raw, _PREAMBLE.size)
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - dims_end
    if actual < expected:
        raise TruncatedPayloadError(path, expected, actual)
    if actual > expected:
        raise TensorFormatError(f"{path}: {actual - expected} trailing bytes after payload")
    if expected == 0:
        return np.zeros(shape)
    return np.frombuffer(raw, dtype=dtype, offset=dims_end).reshape(shape).astype(np.float64)


def save_array(array, path: PathLike) -> Path:
    path = Path(path)
    atomic_write_bytes(path, _encode(np.asarray(array)))
    return path


def load_array(path: PathLike) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Error reading tensor file: {e}")
        raise DatasetError(f"Error reading tensor file: {str(e)}")
    return _decode(raw, str(path))


def save_tensor(value: Union[FeatureMap, ScoreMap], path: PathLike) -> Path:
    """FeatureMaps are stored as (c, h, w) payloads, ScoreMaps as (h, w)."""
    if isinstance(value, FeatureMap):
        return save_array(value.data, path)
    if isinstance(value, ScoreMap):
        return save_array(value.grid, path)
    raise TensorFormatError(f"cannot store {type(value).__name__} as a tensor file")


def load_tensor(path: PathLike) -> Union[FeatureMap, ScoreMap]:
    array = load_array(path)
    if array.ndim == 3:
        return FeatureMap(array)
    if array.ndim == 2:
        return ScoreMap(array.reshape(-1), array.shape[0], array.shape[1])
    raise ShapeMismatchError(f"{path}: expected a 2-D or 3-D tensor, got {array.ndim}-D")


def load_scores(path: PathLike) -> ScoreMap:
    value = load_tensor(path)
    if not isinstance(value, ScoreMap):
        raise ShapeMismatchError(f"{path}: expected an (h, w) score map")
    return value


def load_features(path: PathLike) -> FeatureMap:
    value = load_tensor(path)
    if not isinstance(value, FeatureMap):
        raise ShapeMismatchError(f"{path}: expected a (c, h, w) feature map")
    return value


# --- point files --------------------------------------------------------------

def save_points(points: PointAnnotation, path: PathLike, scores: Optional[Iterable[float]] = None) -> Path:
    """CSV with header ``row,col`` (``row,col,score`` when scores are given)."""
    path = Path(path)
    score_list = None if scores is None else [float(s) for s in scores]
    if score_list is not None and len(score_list) != points.m:
        raise ShapeMismatchError(f"{len(score_list)} scores for {points.m} points")
    lines = ["row,col,score" if score_list is not None else "row,col"]
    for j, (row, col) in enumerate(points.coords):
        fields = [repr(float(row)), repr(float(col))]
        if score_list is not None:
            fields.append(repr(score_list[j]))
        lines.append(",".join(fields))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def load_points_with_scores(path: PathLike) -> Tuple[PointAnnotation, Optional[np.ndarray]]:
    try:
        with open(path, "r", newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        logger.error(f"Error reading point file: {e}")
        raise PointFileError(f"Error reading point file: {str(e)}")
    if not rows or [h.strip() for h in rows[0][:2]] != ["row", "col"]:
        raise PointFileError(f"{path}: expected header 'row,col'")
    has_score = len(rows[0]) > 2 and rows[0][2].strip() == "score"
    width = 3 if has_score else 2
    coords, scores = [], []
    for lineno, fields in enumerate(rows[1:], start=2):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != width:
            raise PointFileError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
        try:
            values = [float(f) for f in fields]
        except ValueError:
            raise PointFileError(f"{path}:{lineno}: non-numeric field in {fields}")
        coords.append(values[:2])
        if has_score:
            scores.append(values[2])
    points = PointAnnotation(np.array(coords, dtype=np.float64).reshape(-1, 2))
    return points, (np.array(scores) if has_score else None)


def load_points(path: PathLike) -> PointAnnotation:
    return load_points_with_scores(path)[0]


def save_csv(path: PathLike, header: Iterable[str], rows: Iterable[Iterable[Any]]) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


# --- output helpers -----------------------------------------------------------

def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a temp file in the target directory, then ``os.replace`` it."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Error writing {path}: {e}")
        raise DatasetError(f"Error writing {path}: {str(e)}")
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: PathLike, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class JsonlWriter:
    """Append-only JSON-lines file, flushed after every record."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "w", encoding="utf-8")
        except OSError as e:
            logger.error(f"Error opening log {self.path}: {e}")
            raise DatasetError(f"Error opening log {self.path}: {str(e)}")

    def write(self, record: Dict[str, Any]) -> None:
        self._file.write(json.dumps(record, sort_keys=True) + "\n")
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: PathLike):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
