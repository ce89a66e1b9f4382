#matching.py

"""
Learning objectives for point-supervised counting.

Point-to-point (P2P) matching pairs every annotated point with one pixel
through the Hungarian algorithm. Point-to-region (P2R) matching first
partitions the pixels within radius ``mu`` of an annotation into nearest-point
regions, then keeps the cheapest pixel of each region as its foreground
target. Both score a (pixel, point) pair by ``tau * distance - S(score)``.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import logit

from .assignment import CostMatrix, hungarian_assign
from .config import CostTransform, MatchingConfig, MatchingScheme
from .core import NONE, MatchMatrix, PointAnnotation, ScoreMap, clamp_probabilities
from .exceptions import AssignmentError, DataError, UnmatchedPointError, UsageError

logger = logging.getLogger(__name__)

TIE_NEIGHBOURS = 8


@dataclass(frozen=True)
class NeighborhoodMask:
    beta: np.ndarray
    mu: float

    @property
    def background(self) -> np.ndarray:
        """1 - beta: pixels farther than mu from every point."""
        return 1.0 - self.beta


@dataclass(frozen=True)
class MatchResult:
    scheme: MatchingScheme
    region_matrix: MatchMatrix
    objective: np.ndarray
    chosen_pixels: np.ndarray
    beta: Optional[NeighborhoodMask] = None
    total_cost: Optional[float] = None

    @property
    def selection(self) -> MatchMatrix:
        """The column-one-hot matrix marking each point's chosen pixel."""
        n, m = self.region_matrix.shape
        return MatchMatrix.from_pairs(n, m, self.chosen_pixels, np.arange(m))


def pairwise_l2(pred_coords, gt_coords) -> np.ndarray:
    pred_coords = np.asarray(pred_coords, dtype=np.float64).reshape(-1, 2)
    gt_coords = np.asarray(gt_coords, dtype=np.float64).reshape(-1, 2)
    if not (np.all(np.isfinite(pred_coords)) and np.all(np.isfinite(gt_coords))):
        raise DataError("coordinates must be finite")
    if gt_coords.shape[0] == 0:
        return np.zeros((pred_coords.shape[0], 0))
    return cdist(pred_coords, gt_coords)


def nearest_points(pred_coords, gt_coords) -> Tuple[np.ndarray, np.ndarray]:
    """
    Index of and distance to each pixel's nearest point, ties going to the
    lower point index. Uses a KD-tree; the dense distance row is only built for
    pixels with more than TIE_NEIGHBOURS equidistant nearest points.
    """
    pred_coords = np.asarray(pred_coords, dtype=np.float64).reshape(-1, 2)
    gt_coords = np.asarray(gt_coords, dtype=np.float64).reshape(-1, 2)
    if not (np.all(np.isfinite(pred_coords)) and np.all(np.isfinite(gt_coords))):
        raise DataError("coordinates must be finite")
    m = gt_coords.shape[0]
    if m == 0:
        raise DataError("nearest-region assignment needs at least one point")
    tree = cKDTree(gt_coords)
    if m == 1:
        dist, index = tree.query(pred_coords, k=1)
        return np.asarray(index, dtype=np.int64), np.asarray(dist, dtype=np.float64)
    dist, index = tree.query(pred_coords, k=2)
    nearest, nearest_dist = index[:, 0].astype(np.int64), dist[:, 0].copy()
    tied = np.flatnonzero(dist[:, 1] <= dist[:, 0])
    if tied.size:
        k = min(m, TIE_NEIGHBOURS)
        tied_dist, tied_index = tree.query(pred_coords[tied], k=k)
        equal = tied_dist == tied_dist[:, :1]
        nearest[tied] = np.where(equal, tied_index, m).min(axis=1)
        # every returned neighbour is equidistant, more may be
        crowded = tied[equal[:, -1]] if k < m else tied[:0]
        if crowded.size:
            exact = cdist(pred_coords[crowded], gt_coords)
            nearest[crowded] = np.argmin(exact, axis=1)
            nearest_dist[crowded] = exact.min(axis=1)
    return nearest, nearest_dist


def inverse_sigmoid(p):
    """S(p) = -log(1/p - 1) on clamped probabilities."""
    return logit(clamp_probabilities(p))


def score_transform(p, transform: CostTransform = CostTransform.INVERSE_SIGMOID) -> np.ndarray:
    if transform == CostTransform.IDENTITY:
        return clamp_probabilities(p)
    return inverse_sigmoid(p)


def p2p_cost(
    pred: ScoreMap,
    gt: PointAnnotation,
    tau: float,
    transform: CostTransform = CostTransform.INVERSE_SIGMOID,
) -> CostMatrix:
    if tau < 0:
        raise UsageError(f"tau must be >= 0, got {tau}")
    dist = pairwise_l2(pred.coords, gt.coords)
    return CostMatrix(tau * dist - score_transform(pred.values, transform)[:, None])


def p2p_objective(
    pred: ScoreMap,
    gt: PointAnnotation,
    tau: float,
    transform: CostTransform = CostTransform.INVERSE_SIGMOID,
) -> MatchResult:
    n, m = pred.n, gt.m
    if m == 0:
        return MatchResult(
            MatchingScheme.P2P, MatchMatrix.empty(n), np.zeros(n), np.zeros(0, dtype=np.int64), total_cost=0.0
        )
    if n < m:
        raise AssignmentError(f"P2P matching needs n >= m, got {n} pixels for {m} points")
    result = hungarian_assign(p2p_cost(pred, gt, tau, transform))
    chosen = np.array([row for row, _ in result.pairs], dtype=np.int64)
    return MatchResult(
        scheme=MatchingScheme.P2P,
        region_matrix=result.match,
        objective=result.match.ones(),
        chosen_pixels=chosen,
        total_cost=result.total_cost,
    )


def nearest_region_matrix(dist) -> MatchMatrix:
    """Assign every pixel to its nearest point; ties go to the lower point index."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[1] == 0:
        raise DataError("nearest-region assignment needs at least one point")
    return MatchMatrix(np.argmin(dist, axis=1), dist.shape[1])


def neighborhood_mask(dist, mu: float) -> NeighborhoodMask:
    if mu <= 0:
        raise UsageError(f"mu must be > 0, got {mu}")
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[1] == 0:
        return NeighborhoodMask(np.zeros(dist.shape[0]), mu)
    return NeighborhoodMask((dist.min(axis=1) < mu).astype(np.float64), mu)


def _regions(dist: np.ndarray, mu: float):
    nearest = nearest_region_matrix(dist)
    mask = neighborhood_mask(dist, mu)
    assignment = np.where(mask.beta > 0, nearest.row_assignment, NONE)
    return MatchMatrix(assignment, dist.shape[1]), mask


def p2r_region(pred: ScoreMap, gt: PointAnnotation, mu: float) -> MatchMatrix:
    """M = M_f masked by beta: row i one-hot at its nearest point when within mu."""
    if mu <= 0:
        raise UsageError(f"mu must be > 0, got {mu}")
    if gt.m == 0:
        return MatchMatrix.empty(pred.n)
    region, _ = _regions(pairwise_l2(pred.coords, gt.coords), mu)
    return region


def p2r_cost(
    pred: ScoreMap,
    gt: PointAnnotation,
    tau: float,
    mu: float,
    transform: CostTransform = CostTransform.INVERSE_SIGMOID,
) -> CostMatrix:
    """Region-restricted cost matrix; entries outside a point's region are forbidden."""
    if gt.m == 0:
        return CostMatrix(np.zeros((pred.n, 0)))
    dist = pairwise_l2(pred.coords, gt.coords)
    region, _ = _regions(dist, mu)
    values = tau * dist - score_transform(pred.values, transform)[:, None]
    return CostMatrix.masked(values, region.to_dense() > 0)


def p2r_objective(
    pred: ScoreMap,
    gt: PointAnnotation,
    tau: float,
    mu: float,
    transform: CostTransform = CostTransform.INVERSE_SIGMOID,
) -> MatchResult:
    if tau < 0:
        raise UsageError(f"tau must be >= 0, got {tau}")
    n, m = pred.n, gt.m
    if m == 0:
        return MatchResult(
            scheme=MatchingScheme.P2R,
            region_matrix=MatchMatrix.empty(n),
            objective=np.zeros(n),
            chosen_pixels=np.zeros(0, dtype=np.int64),
            beta=neighborhood_mask(np.zeros((n, 0)), mu),
        )
    if mu <= 0:
        raise UsageError(f"mu must be > 0, got {mu}")
    nearest, nearest_dist = nearest_points(pred.coords, gt.coords)
    mask = NeighborhoodMask((nearest_dist < mu).astype(np.float64), mu)
    region = MatchMatrix(np.where(mask.beta > 0, nearest, NONE), m)

    # Each admissible pixel belongs to exactly one column, so the masked
    # cost matrix collapses to one cost per admissible row.
    rows = region.matched_rows()
    cols = region.row_assignment[rows]
    costs = tau * nearest_dist[rows] - score_transform(pred.values[rows], transform)
    order = np.lexsort((rows, costs, cols))
    present, first = np.unique(cols[order], return_index=True)
    if present.size < m:
        missing = np.setdiff1d(np.arange(m), present)
        logger.error("P2R regions empty for points %s", missing.tolist())
        raise UnmatchedPointError(missing, mu)
    chosen = rows[order][first]
    objective = np.zeros(n)
    objective[chosen] = 1.0
    return MatchResult(
        scheme=MatchingScheme.P2R,
        region_matrix=region,
        objective=objective,
        chosen_pixels=chosen.astype(np.int64),
        beta=mask,
    )


class Matcher(ABC):
    """Builds the learning objective for a score map and a point set."""

    scheme: MatchingScheme

    def __init__(self, config: MatchingConfig):
        self.config = config

    @abstractmethod
    def objective(self, pred: ScoreMap, gt: PointAnnotation) -> MatchResult:
        pass


class P2PMatcher(Matcher):
    scheme = MatchingScheme.P2P

    def objective(self, pred: ScoreMap, gt: PointAnnotation) -> MatchResult:
        return p2p_objective(pred, gt, self.config.tau, self.config.cost_score_transform)


class P2RMatcher(Matcher):
    scheme = MatchingScheme.P2R

    def objective(self, pred: ScoreMap, gt: PointAnnotation) -> MatchResult:
        return p2r_objective(
            pred, gt, self.config.tau, self.config.mu, self.config.cost_score_transform
        )


def build_matcher(scheme: MatchingScheme, config: MatchingConfig) -> Matcher:
    matchers = {MatchingScheme.P2P: P2PMatcher, MatchingScheme.P2R: P2RMatcher}
    return matchers[MatchingScheme(scheme)](config)
