#test_bench.py

import csv
import json
import math

import numpy as np
import pytest
from pydantic import ValidationError

from p2rCount.bench import BenchReport, grid_shape, p2p_full_loss, p2r_full_loss, random_instance, run_bench
from p2rCount.config import BenchConfig, MatchingConfig


class TestInstances:
    @pytest.mark.parametrize("n, shape", [(1, (1, 1)), (12, (3, 4)), (13, (1, 13)), (8640, (90, 96))])
    def test_grid_shape(self, n, shape):
        assert grid_shape(n) == shape

    def test_seeded(self):
        a, b = random_instance(60, 7, seed=3), random_instance(60, 7, seed=3)
        np.testing.assert_array_equal(a[0].values, b[0].values)
        np.testing.assert_array_equal(a[1].coords, b[1].coords)

    def test_points_on_distinct_pixels(self):
        _, points = random_instance(40, 40, seed=1)
        assert len({tuple(c) for c in points.coords}) == 40

    def test_single_pixel(self):
        scores, points = random_instance(1, 1, seed=0)
        for loss in (p2p_full_loss, p2r_full_loss):
            assert math.isfinite(loss(scores, points, MatchingConfig()))


class TestReport:
    def test_small_run_writes_both_files(self, tmp_path):
        report = run_bench(BenchConfig(n=64, m=8, repeats=3, seed=2))
        assert len(report.p2p_times) == len(report.p2r_times) == 3
        assert all(t > 0 for t in report.p2p_times + report.p2r_times)
        csv_path, json_path = report.write(tmp_path)
        with open(csv_path, newline="") as f:
            header, *rows = list(csv.reader(f))
        assert header == ["repeat", "p2p_seconds", "p2r_seconds"] and len(rows) == 3
        summary = json.loads(json_path.read_text())
        assert summary["n"] == 64 and summary["m"] == 8
        assert summary["ratio"] == pytest.approx(report.ratio)

    def test_ratio_of_medians(self):
        report = BenchReport(4, 1, 3, 0, False, [3.0, 1.0, 2.0], [0.5, 0.1, 0.2])
        assert report.ratio == pytest.approx(10.0)

    def test_too_few_pixels(self):
        with pytest.raises(ValidationError):
            BenchConfig(n=3, m=4)


@pytest.mark.slow
def test_p2r_is_an_order_of_magnitude_faster():
    report = run_bench(BenchConfig(n=8640, m=775, repeats=20, seed=0))
    assert report.ratio >= 10.0
