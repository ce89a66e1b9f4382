#test_psam.py

import tracemalloc

import numpy as np
import pytest
from scipy.ndimage import correlate
from scipy.special import expit

from p2rCount.core import FeatureMap, ScoreMap
from p2rCount.counter import LinearDecoder, MlpDecoder, decoder_backward, decoder_forward, oracle_decoder
from p2rCount.exceptions import DataError, ShapeMismatchError, UsageError
from p2rCount.psam import (
    BlockDecoder,
    aggregate_psam,
    block_gradients,
    chunk_limit,
    compute_psam,
    decode_blocks,
    extract_blocks,
    fill_back,
    iter_blocks,
    omega,
    psam_patch,
    sorted_values,
)
from p2rCount.scenes import generate_scene


def _linear(rng, radius, channels, bias=0.0):
    return LinearDecoder(rng.normal(size=channels * radius * radius), bias, radius, channels)


def _mlp(rng, radius, channels, hidden=5):
    d = channels * radius * radius
    return MlpDecoder(rng.normal(0, 0.3, size=(hidden, d)), rng.normal(size=hidden), rng.normal(size=hidden), 0.1, radius, channels)


class TestExtractBlocks:
    def test_unit_radius_is_identity(self):
        data = np.arange(9, dtype=float).reshape(1, 3, 3)
        blocks = extract_blocks(FeatureMap(data), 1)
        assert blocks.count == 9
        np.testing.assert_array_equal(blocks.blocks[:, 0, 0, 0], np.arange(9))

    def test_centre_block_is_whole_map(self):
        data = np.arange(1, 10, dtype=float).reshape(1, 3, 3)
        np.testing.assert_array_equal(extract_blocks(FeatureMap(data), 3).blocks[4], data)

    def test_corner_block_is_zero_padded(self):
        data = np.arange(1, 10, dtype=float).reshape(1, 3, 3)
        blocks = extract_blocks(FeatureMap(data), 3)
        corner = blocks.blocks[0, 0]
        np.testing.assert_array_equal(corner, [[0, 0, 0], [0, 1, 2], [0, 4, 5]])
        assert blocks.valid[0].sum() == 4

    @pytest.mark.parametrize("radius", [0, 2, 4])
    def test_even_or_empty_radius(self, radius):
        with pytest.raises(UsageError):
            extract_blocks(FeatureMap.zeros(1, 3, 3), radius)

    def test_radius_too_large(self):
        with pytest.raises(UsageError):
            extract_blocks(FeatureMap.zeros(1, 2, 2), 5)

    def test_chunks_cover_every_pixel(self, random_features):
        starts = [chunk.start for chunk in iter_blocks(random_features, 3, 8)]
        assert starts == list(range(0, random_features.n, 8))


class TestDecodeBlocks:
    def test_constant_decoder(self, random_features):
        decoder = LinearDecoder(np.zeros(3 * 9), 1.5, 3, 3)
        scores = decode_blocks(extract_blocks(random_features, 3), decoder)
        np.testing.assert_array_equal(scores.values, expit(1.5))

    def test_blockwise_equals_full_map(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            features = FeatureMap(rng.normal(size=(4, 16, 16)))
            decoder = _linear(rng, 5, 4, bias=-0.3)
            weights = decoder.weights.reshape(4, 5, 5)
            logits = sum(
                correlate(features.data[c], weights[c], mode="constant", cval=0.0) for c in range(4)
            ) + decoder.bias
            blockwise = decode_blocks(extract_blocks(features, 5), decoder)
            np.testing.assert_allclose(blockwise.grid, np.clip(expit(logits), 1e-6, 1 - 1e-6), rtol=0, atol=1e-12)

    def test_locality(self, rng):
        data = np.zeros((2, 9, 9))
        data[:, 4, 4] = 1.0
        scores = decode_blocks(extract_blocks(FeatureMap(data), 3), _linear(rng, 3, 2))
        changed = np.argwhere(scores.grid != 0.5)
        assert changed.size and np.all(np.abs(changed - 4) <= 1)

    def test_radius_mismatch(self, random_features, rng):
        with pytest.raises(UsageError):
            decode_blocks(extract_blocks(random_features, 3), _linear(rng, 5, 3))

    def test_channel_mismatch(self, random_features, rng):
        with pytest.raises(ShapeMismatchError):
            decode_blocks(extract_blocks(random_features, 3), _linear(rng, 3, 2))


class TestBlockGradients:
    def test_linear_gradient_is_scaled_weights(self, random_features, rng):
        decoder = _linear(rng, 3, 3)
        blocks = extract_blocks(random_features, 3)
        grads = block_gradients(blocks, decoder)
        p = decoder.forward_blocks(blocks.flat)
        expected = (p * (1 - p))[:, None] * decoder.weights[None, :]
        np.testing.assert_allclose(grads.reshape(blocks.count, -1), expected, rtol=1e-12)

    def test_matches_finite_differences(self, rng):
        features = FeatureMap(rng.normal(size=(2, 5, 5)))
        decoder = _mlp(rng, 3, 2)
        blocks = extract_blocks(features, 3)
        grads = block_gradients(blocks, decoder).reshape(blocks.count, -1)
        flat = np.array(blocks.flat)
        step = 1e-6
        for q in (0, 12, 24):
            for k in range(flat.shape[1]):
                up, down = flat[q:q + 1].copy(), flat[q:q + 1].copy()
                up[0, k] += step
                down[0, k] -= step
                numeric = (decoder.forward_blocks(up)[0] - decoder.forward_blocks(down)[0]) / (2 * step)
                assert abs(grads[q, k] - numeric) <= 1e-5 * max(abs(numeric), 1e-3)

    def test_constant_decoder_has_no_gradient(self, random_features):
        decoder = LinearDecoder(np.zeros(27), 0.0, 3, 3)
        assert not np.any(block_gradients(extract_blocks(random_features, 3), decoder))

    def test_one_pass_equals_per_pixel_differentiation(self, rng):
        features = FeatureMap(rng.normal(size=(3, 8, 7)))
        decoder = _mlp(rng, 5, 3)
        blocks = extract_blocks(features, 5)
        grads = block_gradients(blocks, decoder)
        for q in rng.choice(features.n, size=3, replace=False):
            upstream = np.zeros(features.n)
            upstream[q] = 1.0
            full = decoder_backward(decoder, features, upstream).fold(features.height, features.width)
            (map_rows, map_cols), (patch_rows, patch_cols) = omega(int(q), 5, features.width).bounds(
                features.height, features.width
            )
            np.testing.assert_allclose(grads[q][:, patch_rows, patch_cols], full[:, map_rows, map_cols], atol=1e-14)
            outside = full.copy()
            outside[:, map_rows, map_cols] = 0.0
            assert not np.any(outside)

    def test_decoder_without_gradients(self, random_features):
        class Frozen(BlockDecoder):
            radius, channels = 3, 3

            def forward_blocks(self, flat_blocks):
                return np.full(flat_blocks.shape[0], 0.5)

        with pytest.raises(UsageError):
            block_gradients(extract_blocks(random_features, 3), Frozen())


class TestPatches:
    def test_sum_of_ones(self):
        np.testing.assert_array_equal(psam_patch(np.ones((3, 2, 2)), np.ones((3, 2, 2))), np.full((2, 2), 3.0))

    def test_negative_correlation_is_floored(self, rng):
        block = rng.normal(size=(2, 3, 3))
        np.testing.assert_array_equal(psam_patch(-block, block), np.zeros((3, 3)))

    def test_channel_sum_then_relu(self):
        grad = np.stack([np.ones((3, 3)), -np.ones((3, 3))])
        block = np.stack([np.full((3, 3), 3.0), np.ones((3, 3))])
        np.testing.assert_array_equal(psam_patch(grad, block), np.full((3, 3), 2.0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psam_patch(np.ones((1, 3, 3)), np.ones((2, 3, 3)))


class TestFillBack:
    def test_centre_pixel(self):
        patch = np.arange(1, 10, dtype=float).reshape(3, 3)
        full = fill_back(patch, 12, omega(12, 3, 5), 5, 5)
        np.testing.assert_array_equal(full[1:4, 1:4], patch)
        assert full.sum() == patch.sum()

    def test_corner_pixel(self):
        patch = np.arange(1, 10, dtype=float).reshape(3, 3)
        full = fill_back(patch, 0, omega(0, 3, 5), 5, 5)
        np.testing.assert_array_equal(full[:2, :2], patch[1:, 1:])
        assert full.sum() == patch[1:, 1:].sum()

    def test_inconsistent_window(self):
        with pytest.raises(DataError):
            fill_back(np.ones((3, 3)), 0, omega(1, 3, 5), 5, 5)


class TestAggregate:
    def test_no_foreground(self, rng):
        patches = rng.uniform(size=(4, 3, 3))
        scores = ScoreMap.uniform(0.4, 2, 2)
        np.testing.assert_array_equal(aggregate_psam(patches, scores, "mean"), np.zeros((3, 3)))
        np.testing.assert_array_equal(aggregate_psam(patches, scores, "global"), np.zeros((2, 2)))
        assert sorted_values(patches, scores).size == 0

    def test_single_foreground_pixel(self, rng):
        patches = rng.uniform(size=(25, 3, 3))
        values = np.full(25, 0.1)
        values[12] = 0.9
        scores = ScoreMap(values, 5, 5)
        np.testing.assert_array_equal(aggregate_psam(patches, scores, "mean"), patches[12])
        np.testing.assert_array_equal(aggregate_psam(patches, scores, "global")[1:4, 1:4], patches[12])

    def test_global_mass_is_additive(self, rng):
        patches = rng.uniform(size=(64, 3, 3))
        values = np.full(64, 0.1)
        values[[9, 54]] = 0.8
        total = aggregate_psam(patches, ScoreMap(values, 8, 8), "global")
        assert total.sum() == pytest.approx(patches[9].sum() + patches[54].sum())

    def test_unknown_mode(self, rng):
        with pytest.raises(UsageError):
            aggregate_psam(rng.uniform(size=(4, 1, 1)), ScoreMap.uniform(0.9, 2, 2), "median")


class TestComputePsam:
    def test_locality_on_sixteen_grid(self, rng):
        features = FeatureMap(rng.normal(size=(4, 16, 16)))
        result = compute_psam(features, _mlp(rng, 5, 4))
        for q in range(features.n):
            full = result.full_map(q)
            (map_rows, map_cols), _ = omega(q, 5, 16).bounds(16, 16)
            assert np.all(full >= 0)
            full[map_rows, map_cols] = 0.0
            assert not np.any(full)

    @pytest.mark.parametrize("channels, chunk_size", [(4, 16), (1, 16), (1, 512)])
    def test_working_set_stays_block_sized(self, rng, channels, chunk_size):
        features = FeatureMap(rng.normal(size=(channels, 16, 16)))
        decoder = _linear(rng, 5, channels)
        budget = features.n * 5 * 5 * channels
        tracemalloc.start()
        try:
            result = compute_psam(features, decoder, chunk_size=chunk_size)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        assert result.working_set <= budget
        assert result.result_size == features.n * 5 * 5 + features.n
        assert peak <= (budget + result.result_size) * 8 * 3

    def test_chunk_limit(self):
        assert chunk_limit(256, 16) == 16
        assert chunk_limit(256, 512) == 128
        assert chunk_limit(1, 16) == 1
        with pytest.raises(UsageError):
            chunk_limit(10, 0)

    def test_zero_weights_give_empty_output(self, random_features):
        result = compute_psam(random_features, LinearDecoder(np.zeros(27), 0.0, 3, 3))
        assert result.foreground.size == 0
        assert result.sorted_values().size == 0

    def test_planted_point_matched_filter(self):
        scene = generate_scene(1, 9, 9, 4, 0.0, seed=2)
        decoder = oracle_decoder(3, 4)
        result = compute_psam(scene.features, decoder)
        planted = int(scene.gt_points.coords[0, 0]) * 9 + int(scene.gt_points.coords[0, 1])
        assert result.foreground.tolist() == [planted]
        patch = result.patches[planted]
        assert patch[1, 1] > 0
        patch = patch.copy()
        patch[1, 1] = 0.0
        assert not np.any(patch)

    def test_scores_match_decoder_forward(self, random_features, rng):
        decoder = _linear(rng, 3, 3)
        result = compute_psam(random_features, decoder, chunk_size=5)
        np.testing.assert_allclose(result.scores.values, decoder_forward(decoder, random_features).values, rtol=0, atol=1e-15)
