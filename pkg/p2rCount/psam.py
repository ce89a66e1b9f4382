#psam.py

"""
Point-specific activation maps (PSAM).

The decoder sees an ``r x r`` window of the feature map around each output
pixel, so the gradient of ``p[q]`` with respect to the features is zero
outside that window. Extracting one window per pixel ("blocks") and
differentiating ``sum(p)`` with respect to the blocks therefore yields every
pixel's gradient in a single backward pass, and the activation map of pixel
``q`` is the channel-summed, rectified product of its block and gradient,
pasted back at the block's position.

Blocks are processed in fixed-size chunks so the working set never exceeds
``n * r * r * c`` values.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import AggregateMode
from .core import FeatureMap, ScoreMap
from .exceptions import DataError, ShapeMismatchError, UsageError

logger = logging.getLogger(__name__)

FOREGROUND_THRESHOLD = 0.5


class BlockDecoder(ABC):
    """
    Anything that maps an ``r x r x c`` block to one probability. PSAM only
    relies on this pair of calls, never on decoder internals.
    """

    radius: int
    channels: int

    @abstractmethod
    def forward_blocks(self, flat_blocks: np.ndarray) -> np.ndarray:
        """(k, c*r*r) blocks -> (k,) probabilities."""

    def input_gradient(self, flat_blocks: np.ndarray) -> np.ndarray:
        """(k, c*r*r) blocks -> (k, c*r*r) gradients of each output w.r.t. its block."""
        raise UsageError(f"{type(self).__name__} does not provide gradients")


@dataclass(frozen=True)
class Omega:
    """Receptive-field window of pixel ``q``: top-left corner and side length."""

    q: int
    top: int
    left: int
    radius: int

    def bounds(self, height: int, width: int):
        """In-grid slices of the map and the matching slices of the patch."""
        r0, c0 = max(self.top, 0), max(self.left, 0)
        r1, c1 = min(self.top + self.radius, height), min(self.left + self.radius, width)
        return (slice(r0, r1), slice(c0, c1)), (slice(r0 - self.top, r1 - self.top), slice(c0 - self.left, c1 - self.left))


def omega(q: int, radius: int, width: int) -> Omega:
    pad = radius // 2
    row, col = divmod(q, width)
    return Omega(q=q, top=row - pad, left=col - pad, radius=radius)


@dataclass(frozen=True)
class BlockSet:
    """
    Sliding ``r x r`` blocks for pixels ``start .. start + k``.

    ``blocks`` has shape ``(k, c, r, r)``; ``valid`` flags in-grid cells,
    the remaining cells are zero padding.
    """

    blocks: np.ndarray
    valid: np.ndarray
    radius: int
    height: int
    width: int
    start: int = 0

    @property
    def count(self) -> int:
        return self.blocks.shape[0]

    @property
    def channels(self) -> int:
        return self.blocks.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.blocks.reshape(self.count, -1)

    def omega(self, index: int) -> Omega:
        return omega(self.start + index, self.radius, self.width)


def _check_radius(radius: int, height: int, width: int) -> None:
    if radius < 1 or radius % 2 == 0:
        raise UsageError(f"receptive field must be a positive odd integer, got {radius}")
    if radius > 2 * min(height, width) - 1:
        raise UsageError(f"receptive field {radius} too large for a {height}x{width} grid")


class _Windows:
    """Strided views over the zero-padded feature map; no block is copied until requested."""

    def __init__(self, features: FeatureMap, radius: int):
        _check_radius(radius, features.height, features.width)
        pad = radius // 2
        padded = np.pad(features.data, ((0, 0), (pad, pad), (pad, pad)))
        inside = np.pad(np.ones((features.height, features.width), dtype=bool), pad)
        # (h, w, c, r, r) and (h, w, r, r) views
        self.windows = sliding_window_view(padded, (radius, radius), axis=(1, 2)).transpose(1, 2, 0, 3, 4)
        self.inside = sliding_window_view(inside, (radius, radius))
        self.features = features
        self.radius = radius

    def take(self, start: int, stop: int) -> BlockSet:
        rows, cols = np.divmod(np.arange(start, stop), self.features.width)
        return BlockSet(
            blocks=self.windows[rows, cols],
            valid=self.inside[rows, cols],
            radius=self.radius,
            height=self.features.height,
            width=self.features.width,
            start=start,
        )


def extract_blocks(features: FeatureMap, radius: int) -> BlockSet:
    """One zero-padded ``r x r`` block per pixel, centred on that pixel."""
    return _Windows(features, radius).take(0, features.n)


def iter_blocks(features: FeatureMap, radius: int, chunk_size: int) -> Iterator[BlockSet]:
    if chunk_size < 1:
        raise UsageError(f"chunk size must be >= 1, got {chunk_size}")
    windows = _Windows(features, radius)
    for start in range(0, features.n, chunk_size):
        yield windows.take(start, min(start + chunk_size, features.n))


def _check_decoder(blocks: BlockSet, decoder: BlockDecoder) -> None:
    if decoder.radius != blocks.radius:
        raise UsageError(
            f"receptive field mismatch: decoder uses {decoder.radius}, blocks use {blocks.radius}"
        )
    if decoder.channels != blocks.channels:
        raise ShapeMismatchError(
            f"channel mismatch: decoder expects {decoder.channels}, blocks carry {blocks.channels}"
        )


def decode_blocks(blocks: BlockSet, decoder: BlockDecoder) -> ScoreMap:
    """Decode every block and keep the centre output as the pixel score."""
    _check_decoder(blocks, decoder)
    if blocks.start != 0 or blocks.count != blocks.height * blocks.width:
        raise ShapeMismatchError("decode_blocks needs the blocks of every pixel")
    return ScoreMap(decoder.forward_blocks(blocks.flat), blocks.height, blocks.width)


def block_gradients(blocks: BlockSet, decoder: BlockDecoder) -> np.ndarray:
    """
    Gradient of ``xi = sum(p)`` with respect to each block. Since
    ``d xi / d p[q] = 1``, block ``q`` holds ``d p[q] / d block_q``.
    Padding cells carry whatever the decoder reports; ``blocks.valid``
    marks them invalid.
    """
    _check_decoder(blocks, decoder)
    return decoder.input_gradient(blocks.flat).reshape(blocks.blocks.shape)


def psam_patch(grad_q, block_q) -> np.ndarray:
    """max(sum over channels of grad * block, 0) for one ``(c, r, r)`` block."""
    grad_q = np.asarray(grad_q, dtype=np.float64)
    block_q = np.asarray(block_q, dtype=np.float64)
    if grad_q.shape != block_q.shape or grad_q.ndim != 3:
        raise ShapeMismatchError(f"gradient {grad_q.shape} and block {block_q.shape} must both be (c, r, r)")
    return np.maximum(np.einsum("cij,cij->ij", grad_q, block_q), 0.0)


def psam_patches(grads: np.ndarray, blocks: np.ndarray, out: Optional[np.ndarray] = None) -> np.ndarray:
    if grads.shape != blocks.shape:
        raise ShapeMismatchError(f"gradients {grads.shape} and blocks {blocks.shape} differ")
    out = np.einsum("kcij,kcij->kij", grads, blocks, out=out)
    return np.maximum(out, 0.0, out=out)


def fill_back(patch, q: int, omega_q: Omega, height: int, width: int) -> np.ndarray:
    """Paste ``patch`` into an all-zero ``h x w`` map at pixel ``q``'s window."""
    patch = np.asarray(patch, dtype=np.float64)
    expected = omega(q, omega_q.radius, width)
    if omega_q != expected or patch.shape != (omega_q.radius, omega_q.radius):
        raise DataError(f"receptive window {omega_q} is inconsistent with pixel {q} and patch {patch.shape}")
    out = np.zeros((height, width))
    (map_rows, map_cols), (patch_rows, patch_cols) = omega_q.bounds(height, width)
    out[map_rows, map_cols] = patch[patch_rows, patch_cols]
    return out


def foreground_pixels(scores: ScoreMap) -> np.ndarray:
    return np.flatnonzero(scores.values > FOREGROUND_THRESHOLD)


def aggregate_psam(patches, scores: ScoreMap, mode: AggregateMode) -> np.ndarray:
    """
    Sum the patches of foreground pixels (score > 0.5).

    ``mean`` sums the ``r x r`` patches element-wise; ``global`` sums the
    filled-back ``h x w`` maps.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[0] != scores.n or patches.shape[1] != patches.shape[2]:
        raise ShapeMismatchError(f"expected {scores.n} square patches, got shape {patches.shape}")
    try:
        mode = AggregateMode(mode)
    except ValueError:
        raise UsageError(f"unknown aggregation mode {mode!r}")
    radius = patches.shape[1]
    foreground = foreground_pixels(scores)
    if mode == AggregateMode.MEAN:
        return patches[foreground].sum(axis=0) if foreground.size else np.zeros((radius, radius))
    total = np.zeros((scores.height, scores.width))
    for q in foreground:
        (map_rows, map_cols), (patch_rows, patch_cols) = omega(int(q), radius, scores.width).bounds(
            scores.height, scores.width
        )
        total[map_rows, map_cols] += patches[q][patch_rows, patch_cols]
    return total


def sorted_values(patches, scores: ScoreMap) -> np.ndarray:
    """Descending values of the mean foreground patch; empty when nothing is foreground."""
    foreground = foreground_pixels(scores)
    if foreground.size == 0:
        return np.zeros(0)
    mean_patch = aggregate_psam(patches, scores, AggregateMode.MEAN) / foreground.size
    return np.sort(mean_patch.reshape(-1))[::-1]


@dataclass(frozen=True)
class PsamResult:
    scores: ScoreMap
    patches: np.ndarray
    foreground: np.ndarray
    radius: int
    working_set: int
    result_size: int

    def aggregate(self, mode: AggregateMode) -> np.ndarray:
        return aggregate_psam(self.patches, self.scores, mode)

    def sorted_values(self) -> np.ndarray:
        return sorted_values(self.patches, self.scores)

    def full_map(self, q: int) -> np.ndarray:
        return fill_back(self.patches[q], q, omega(q, self.radius, self.scores.width), self.scores.height, self.scores.width)


def chunk_limit(n: int, chunk_size: int) -> int:
    """Blocks per chunk, capped at half the pixels so blocks plus gradients fit in n * r * r * c."""
    if chunk_size < 1:
        raise UsageError(f"chunk size must be >= 1, got {chunk_size}")
    return max(1, min(chunk_size, n // 2))


def compute_psam(features: FeatureMap, decoder: BlockDecoder, chunk_size: int = 16) -> PsamResult:
    """
    Scores and PSAM patches for every pixel.

    The working set is what one chunk holds while it is processed: its blocks
    and their gradients, ``k * r * r * c`` values each. Patches are written
    straight into the ``n * r * r`` result buffer, reported as ``result_size``.
    A single-pixel map is the one case that exceeds ``n * r * r * c``.
    """
    radius = decoder.radius
    n = features.n
    chunk_size = chunk_limit(n, chunk_size)
    patches = np.zeros((n, radius, radius))
    scores = np.zeros(n)
    for chunk in iter_blocks(features, radius, chunk_size):
        _check_decoder(chunk, decoder)
        stop = chunk.start + chunk.count
        scores[chunk.start:stop] = decoder.forward_blocks(chunk.flat)
        grads = block_gradients(chunk, decoder)
        psam_patches(grads, chunk.blocks, out=patches[chunk.start:stop])
    score_map = ScoreMap(scores, features.height, features.width)
    working_set = 2 * chunk_size * radius * radius * features.channels
    foreground = foreground_pixels(score_map)
    if foreground.size == 0:
        logger.warning("no foreground pixels; PSAM output is empty")
    return PsamResult(score_map, patches, foreground, radius, working_set, n * radius * radius + n)
