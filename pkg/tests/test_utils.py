#test_utils.py

import struct

import numpy as np
import pytest

from p2rCount.core import FeatureMap, PointAnnotation, ScoreMap
from p2rCount.exceptions import (
    BadDtypeError,
    BadMagicError,
    DatasetError,
    PointFileError,
    ShapeMismatchError,
    TensorFormatError,
    TruncatedPayloadError,
)
from p2rCount.utils import (
    JsonlWriter,
    load_array,
    load_features,
    load_points,
    load_points_with_scores,
    load_scores,
    load_tensor,
    read_jsonl,
    save_array,
    save_points,
    save_tensor,
    sha256_file,
    write_json,
)


class TestTensorFile:
    def test_feature_map_layout(self, tmp_path):
        data = np.arange(18, dtype=np.float64).reshape(2, 3, 3)
        path = save_tensor(FeatureMap(data), tmp_path / "f.p2rt")
        raw = path.read_bytes()
        assert raw[:4] == b"P2RT"
        assert struct.unpack_from("<IBI", raw, 4) == (1, 1, 3)
        assert struct.unpack_from("<3I", raw, 13) == (2, 3, 3)
        np.testing.assert_array_equal(load_features(path).data, data)

    def test_score_map_stored_as_grid(self, tmp_path):
        scores = ScoreMap(np.linspace(0.1, 0.9, 6), 2, 3)
        loaded = load_tensor(save_tensor(scores, tmp_path / "s.p2rt"))
        assert isinstance(loaded, ScoreMap)
        assert (loaded.height, loaded.width) == (2, 3)
        np.testing.assert_array_equal(loaded.values, scores.values)

    def test_float32_payload(self, tmp_path):
        path = save_array(np.ones((2, 2), dtype=np.float32), tmp_path / "a.p2rt")
        assert path.stat().st_size == 13 + 8 + 16
        assert load_array(path).dtype == np.float64

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.p2rt"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(BadMagicError):
            load_array(path)

    def test_truncated_payload_names_sizes(self, tmp_path):
        path = save_array(np.zeros((2, 3, 3)), tmp_path / "t.p2rt")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(TruncatedPayloadError) as info:
            load_array(path)
        assert info.value.expected == 144
        assert info.value.actual == 136
        assert "144" in str(info.value) and "136" in str(info.value)

    def test_trailing_bytes(self, tmp_path):
        path = save_array(np.zeros(3), tmp_path / "t.p2rt")
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(TensorFormatError, match="trailing"):
            load_array(path)

    def test_unknown_dtype(self, tmp_path):
        raw = bytearray(save_array(np.zeros(2), tmp_path / "d.p2rt").read_bytes())
        raw[8] = 7
        (tmp_path / "d.p2rt").write_bytes(bytes(raw))
        with pytest.raises(BadDtypeError):
            load_array(tmp_path / "d.p2rt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            load_array(tmp_path / "absent.p2rt")

    def test_kind_checks(self, tmp_path):
        path = save_array(np.zeros((2, 2)), tmp_path / "s.p2rt")
        with pytest.raises(ShapeMismatchError):
            load_features(path)
        path = save_array(np.zeros((1, 2, 2)), tmp_path / "f.p2rt")
        with pytest.raises(ShapeMismatchError):
            load_scores(path)

    def test_empty_payload(self, tmp_path):
        assert load_array(save_array(np.zeros((0, 2)), tmp_path / "e.p2rt")).shape == (0, 2)


class TestPointFiles:
    def test_round_trip_with_scores(self, tmp_path):
        points = PointAnnotation(np.array([[1.0, 2.0], [3.5, 0.0]]))
        path = save_points(points, tmp_path / "p.csv", scores=[0.9, 0.6])
        assert path.read_text().splitlines()[0] == "row,col,score"
        loaded, scores = load_points_with_scores(path)
        np.testing.assert_array_equal(loaded.coords, points.coords)
        np.testing.assert_array_equal(scores, [0.9, 0.6])

    def test_header_only_is_empty(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("row,col\n")
        assert load_points(path).m == 0

    def test_bad_header(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(PointFileError):
            load_points(path)

    def test_non_numeric_field(self, tmp_path):
        path = tmp_path / "p.csv"
        path.write_text("row,col\n1,abc\n")
        with pytest.raises(PointFileError, match=":2:"):
            load_points(path)


class TestOutputHelpers:
    def test_write_json_is_sorted(self, tmp_path):
        path = write_json(tmp_path / "x.json", {"b": 1, "a": 2})
        assert path.read_text().index('"a"') < path.read_text().index('"b"')

    def test_jsonl_writer(self, tmp_path):
        with JsonlWriter(tmp_path / "log.jsonl") as writer:
            writer.write({"epoch": 0, "loss": 1.5})
            writer.write({"epoch": 1, "loss": 1.0})
        assert read_jsonl(tmp_path / "log.jsonl") == [{"epoch": 0, "loss": 1.5}, {"epoch": 1, "loss": 1.0}]

    def test_sha256_changes_with_content(self, tmp_path):
        a = tmp_path / "a.txt"
        a.write_text("one")
        first = sha256_file(a)
        a.write_text("two")
        assert sha256_file(a) != first
        assert len(first) == 64
