#test_matching.py

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2rCount.config import CostTransform, MatchingConfig, MatchingScheme
from p2rCount.core import NONE, PointAnnotation, ScoreMap
from p2rCount.exceptions import AssignmentError, DataError, UnmatchedPointError, UsageError
from p2rCount.matching import (
    P2PMatcher,
    P2RMatcher,
    build_matcher,
    inverse_sigmoid,
    nearest_points,
    nearest_region_matrix,
    neighborhood_mask,
    p2p_cost,
    p2p_objective,
    p2r_cost,
    p2r_objective,
    p2r_region,
    pairwise_l2,
)


class TestDistances:
    def test_three_four_five(self):
        assert pairwise_l2([[0.0, 0.0]], [[3.0, 4.0]])[0, 0] == 5.0

    def test_grid_against_origin(self, grid_2x2):
        np.testing.assert_allclose(pairwise_l2(grid_2x2.coords, [[0.0, 0.0]])[:, 0], [0, 1, 1, math.sqrt(2)])

    def test_no_points(self, grid_2x2):
        assert pairwise_l2(grid_2x2.coords, np.zeros((0, 2))).shape == (4, 0)

    def test_non_finite(self):
        with pytest.raises(DataError):
            pairwise_l2([[0.0, np.inf]], [[0.0, 0.0]])


class TestInverseSigmoid:
    def test_values(self):
        assert inverse_sigmoid(0.5) == 0.0
        assert inverse_sigmoid(0.9) == pytest.approx(math.log(9), abs=1e-12)

    def test_odd_symmetry(self, rng):
        p = rng.uniform(0.01, 0.99, size=100)
        np.testing.assert_allclose(inverse_sigmoid(p), -inverse_sigmoid(1 - p), atol=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=1e-5, max_value=1 - 1e-5), st.floats(min_value=1e-5, max_value=1 - 1e-5))
    def test_strictly_increasing(self, a, b):
        if b - a > 1e-9:
            assert inverse_sigmoid(a) < inverse_sigmoid(b)


class TestP2P:
    def test_zero_tau_uniform_scores(self, grid_2x2, one_point_origin):
        np.testing.assert_array_equal(p2p_cost(grid_2x2, one_point_origin, 0.0).values, 0.0)

    def test_single_pixel_cost(self):
        cost = p2p_cost(ScoreMap(np.array([0.9]), 1, 1), PointAnnotation([[0.0, 1.0]]), 8.0)
        assert cost.values[0, 0] == pytest.approx(8 - math.log(9), abs=1e-5)

    def test_identity_transform(self):
        cost = p2p_cost(ScoreMap(np.array([0.9]), 1, 1), PointAnnotation([[0.0, 1.0]]), 8.0, CostTransform.IDENTITY)
        assert cost.values[0, 0] == pytest.approx(7.1)

    def test_empty_annotation(self, grid_2x2):
        result = p2p_objective(grid_2x2, PointAnnotation.empty(), 8.0)
        np.testing.assert_array_equal(result.objective, np.zeros(4))

    def test_nearest_pixel_chosen(self, grid_2x2, one_point_origin):
        np.testing.assert_array_equal(p2p_objective(grid_2x2, one_point_origin, 8.0).objective, [1, 0, 0, 0])

    def test_two_points_one_hot_each(self):
        scores = ScoreMap.uniform(0.5, 3, 3)
        result = p2p_objective(scores, PointAnnotation([[0.0, 0.0], [2.0, 1.0]]), 8.0)
        np.testing.assert_array_equal(result.chosen_pixels, [0, 7])
        assert result.objective.sum() == 2

    def test_too_many_points(self):
        with pytest.raises(AssignmentError):
            p2p_objective(ScoreMap.uniform(0.5, 1, 1), PointAnnotation([[0.0, 0.0], [0.0, 0.0]]), 8.0)


class TestRegions:
    def test_single_point_owns_everything(self, grid_2x2, one_point_origin):
        dist = pairwise_l2(grid_2x2.coords, one_point_origin.coords)
        np.testing.assert_array_equal(nearest_region_matrix(dist).row_assignment, [0, 0, 0, 0])

    def test_tie_goes_to_lower_index(self, grid_2x2):
        dist = pairwise_l2(grid_2x2.coords, [[0.0, 0.0], [1.0, 1.0]])
        np.testing.assert_array_equal(nearest_region_matrix(dist).row_assignment, [0, 0, 0, 1])

    def test_tree_query_matches_dense_argmin(self):
        rng = np.random.default_rng(11)
        scores = ScoreMap.uniform(0.5, 12, 15)
        # integer points on an integer grid tie often, three ways at times
        points = PointAnnotation(rng.integers(0, 12, size=(9, 2)).astype(float))
        nearest, dist = nearest_points(scores.coords, points.coords)
        dense = pairwise_l2(scores.coords, points.coords)
        np.testing.assert_array_equal(nearest, nearest_region_matrix(dense).row_assignment)
        np.testing.assert_allclose(dist, dense.min(axis=1))

    def test_three_way_tie_goes_to_lowest_index(self):
        nearest, dist = nearest_points([[1.0, 1.0]], [[2.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        assert nearest.tolist() == [0] and dist.tolist() == [1.0]

    def test_crowded_tie_falls_back_to_dense(self):
        # twelve lattice points sit exactly 5 from the origin
        ring = [[5, 0], [4, 3], [3, 4], [0, 5], [-3, 4], [-4, 3], [-5, 0], [-4, -3], [-3, -4], [0, -5], [3, -4], [4, -3]]
        ring = np.array(ring[::-1], dtype=float)
        nearest, dist = nearest_points([[0.0, 0.0]], ring)
        assert nearest.tolist() == [0] and dist.tolist() == [5.0]

    def test_tree_query_needs_a_point(self):
        with pytest.raises(DataError):
            nearest_points([[0.0, 0.0]], np.zeros((0, 2)))

    def test_needs_a_point(self):
        with pytest.raises(DataError):
            nearest_region_matrix(np.zeros((3, 0)))

    def test_mask_strict_radius(self, grid_2x2, one_point_origin):
        dist = pairwise_l2(grid_2x2.coords, one_point_origin.coords)
        np.testing.assert_array_equal(neighborhood_mask(dist, 1.5).beta, [1, 1, 1, 1])
        np.testing.assert_array_equal(neighborhood_mask(dist, 1.0).beta, [1, 0, 0, 0])
        np.testing.assert_array_equal(neighborhood_mask(np.zeros((4, 0)), 1.0).beta, np.zeros(4))

    def test_mask_requires_positive_radius(self):
        with pytest.raises(UsageError):
            neighborhood_mask(np.zeros((1, 1)), 0.0)

    def test_large_radius_keeps_nearest_regions(self):
        scores = ScoreMap.uniform(0.5, 4, 4)
        points = PointAnnotation([[0.0, 0.0], [3.0, 3.0]])
        region = p2r_region(scores, points, 100.0)
        dist = pairwise_l2(scores.coords, points.coords)
        np.testing.assert_array_equal(region.row_assignment, nearest_region_matrix(dist).row_assignment)

    def test_tiny_radius_only_keeps_point_pixels(self):
        scores = ScoreMap.uniform(0.5, 4, 4)
        points = PointAnnotation([[0.5, 0.5]])
        assert p2r_region(scores, points, 0.1).matched_rows().size == 0

    def test_well_separated_regions_are_disjoint(self):
        scores = ScoreMap.uniform(0.5, 10, 10)
        region = p2r_region(scores, PointAnnotation([[2.0, 2.0], [7.0, 7.0]]), 2.5)
        first, second = set(region.rows_of(0)), set(region.rows_of(1))
        assert first and second and not first & second
        assert np.all(region.row_assignment[region.ones() == 0] == NONE)

    def test_forbidden_entries_outside_regions(self, grid_2x2, one_point_origin):
        cost = p2r_cost(grid_2x2, one_point_origin, 8.0, 1.0)
        np.testing.assert_array_equal(cost.forbidden[:, 0], [False, True, True, True])


class TestP2R:
    def test_confident_pixel_wins(self, line_scores):
        result = p2r_objective(line_scores, PointAnnotation([[0.0, 0.0]]), 8.0, 64.0)
        np.testing.assert_array_equal(result.objective, [1, 0, 0, 0])
        cost = p2r_cost(line_scores, PointAnnotation([[0.0, 0.0]]), 8.0, 64.0)
        np.testing.assert_allclose(cost.values[:2, 0], [-math.log(9), 8 + math.log(9)], atol=1e-5)

    def test_zero_tau_picks_score_argmax(self):
        scores = ScoreMap(np.array([0.2, 0.3, 0.8, 0.1]), 1, 4)
        result = p2r_objective(scores, PointAnnotation([[0.0, 0.0]]), 0.0, 64.0)
        assert result.chosen_pixels.tolist() == [2]

    def test_large_tau_picks_nearest(self):
        scores = ScoreMap(np.array([0.2, 0.3, 0.8, 0.1]), 1, 4)
        result = p2r_objective(scores, PointAnnotation([[0.0, 1.0]]), 1e4, 64.0)
        assert result.chosen_pixels.tolist() == [1]

    def test_isolated_point_reported(self):
        scores = ScoreMap.uniform(0.5, 3, 3)
        points = PointAnnotation([[0.0, 0.0], [1.5, 1.5]])
        with pytest.raises(UnmatchedPointError) as info:
            p2r_objective(scores, points, 8.0, 0.5)
        assert info.value.point_indices == [1]

    def test_empty_annotation(self, grid_2x2):
        result = p2r_objective(grid_2x2, PointAnnotation.empty(), 8.0, 4.0)
        assert result.objective.sum() == 0
        np.testing.assert_array_equal(result.beta.beta, np.zeros(4))

    def test_single_point_agrees_with_p2p(self, rng):
        scores = ScoreMap(rng.uniform(0.05, 0.95, size=36), 6, 6)
        points = PointAnnotation([[2.0, 3.0]])
        p2p = p2p_objective(scores, points, 8.0)
        p2r = p2r_objective(scores, points, 8.0, 100.0)
        np.testing.assert_array_equal(p2p.chosen_pixels, p2r.chosen_pixels)

    def test_mu_monotone(self, rng):
        scores = ScoreMap(rng.uniform(size=64), 8, 8)
        points = PointAnnotation([[1.0, 1.0], [6.0, 5.0]])
        previous = set()
        for mu in (1.0, 1.5, 2.5, 4.0, 8.0):
            rows = set(p2r_region(scores, points, mu).matched_rows().tolist())
            assert previous <= rows
            previous = rows

    def test_region_agrees_with_dense_region(self):
        rng = np.random.default_rng(12)
        scores = ScoreMap(rng.uniform(size=90), 9, 10)
        points = PointAnnotation(scores.coords[rng.choice(90, size=14, replace=False)])
        result = p2r_objective(scores, points, 8.0, 3.0)
        dense = p2r_region(scores, points, 3.0)
        np.testing.assert_array_equal(result.region_matrix.row_assignment, dense.row_assignment)

    def test_random_small_instances_against_scan(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            h = int(rng.integers(1, 4))
            w = int(rng.integers(1, 10 // h + 1))
            n = h * w
            m = int(rng.integers(1, min(n, 3) + 1))
            scores = ScoreMap(rng.uniform(size=n), h, w)
            points = PointAnnotation(scores.coords[rng.choice(n, size=m, replace=False)])
            tau = float(rng.uniform(0, 10))
            result = p2r_objective(scores, points, tau, 1.5)
            assert result.objective.sum() == m
            dist = pairwise_l2(scores.coords, points.coords)
            cost = tau * dist - inverse_sigmoid(scores.values)[:, None]
            for j, chosen in enumerate(result.chosen_pixels):
                region = [i for i in range(n) if np.argmin(dist[i]) == j and dist[i].min() < 1.5]
                assert chosen in region
                best = min(region, key=lambda i: (cost[i, j], i))
                assert chosen == best


class TestMatchers:
    def test_build_matcher(self):
        config = MatchingConfig(tau=2.0, mu=3.0)
        assert isinstance(build_matcher(MatchingScheme.P2P, config), P2PMatcher)
        assert isinstance(build_matcher("p2r", config), P2RMatcher)

    def test_matcher_uses_config(self, line_scores):
        matcher = build_matcher(MatchingScheme.P2R, MatchingConfig(tau=0.0, mu=64.0))
        result = matcher.objective(line_scores, PointAnnotation([[0.0, 3.0]]))
        assert result.scheme == MatchingScheme.P2R
        assert result.chosen_pixels.tolist() == [0]
