#loss.py

"""
Binary cross-entropy losses over score maps.

Every loss is a sum over pixels; callers normalize by batch size. The
foreground and background terms are reduced separately, in pixel order,
so results are bit-reproducible and the masked background term is an
exact zero whenever its weights are.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .config import MatchingScheme
from .core import ConfidenceMask, MatchMatrix, PointAnnotation, ScoreMap
from .exceptions import InvariantError, ShapeMismatchError, UsageError
from .matching import Matcher, MatchResult, NeighborhoodMask

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    foreground_term: float
    background_term: float
    active_pixel_count: int

    @classmethod
    def zero(cls) -> "LossBreakdown":
        return cls(0.0, 0.0, 0.0, 0)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        fg = self.foreground_term + other.foreground_term
        bg = self.background_term + other.background_term
        return LossBreakdown(fg + bg, fg, bg, self.active_pixel_count + other.active_pixel_count)

    def scaled(self, factor: float) -> "LossBreakdown":
        fg = self.foreground_term * factor
        bg = self.background_term * factor
        return LossBreakdown(fg + bg, fg, bg, self.active_pixel_count)

    def to_record(self, step: int) -> Dict[str, float]:
        return {
            "step": step,
            "total": self.total,
            "fg": self.foreground_term,
            "bg": self.background_term,
            "active": self.active_pixel_count,
        }


def _vector(values, n: int, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != n:
        raise ShapeMismatchError(f"{name} has length {values.size}, expected {n}")
    return values


def _terms(p: ScoreMap, target, weights, lambda_: float) -> LossBreakdown:
    if lambda_ <= 0:
        raise UsageError(f"lambda must be > 0, got {lambda_}")
    target = _vector(target, p.n, "objective")
    weights = _vector(weights, p.n, "confidence")
    fg_weights = weights * target
    bg_weights = weights * (1.0 - target)
    # Zero weights multiply the log terms exactly, so an all-zero weight
    # vector yields an exact 0.0 term.
    foreground = -lambda_ * float(np.add.reduce(fg_weights * np.log(p.values)))
    background = -float(np.add.reduce(bg_weights * np.log1p(-p.values)))
    # -0.0 from an all-zero weight vector reads as 0.0
    foreground = foreground + 0.0
    background = background + 0.0
    return LossBreakdown(
        total=foreground + background,
        foreground_term=foreground,
        background_term=background,
        active_pixel_count=int(np.count_nonzero(weights)),
    )


def weighted_bce(p: ScoreMap, target, lambda_: float = 1.0) -> LossBreakdown:
    """-lambda * t.log p - (1 - t).log(1 - p)."""
    return _terms(p, target, np.ones(p.n), lambda_)


def masked_bce(p_s: ScoreMap, target, z: ConfidenceMask, lambda_: float = 1.0) -> LossBreakdown:
    """Weighted BCE with every pixel term multiplied by its confidence."""
    if z.n != p_s.n:
        raise ShapeMismatchError(f"confidence mask has length {z.n}, expected {p_s.n}")
    return _terms(p_s, target, z.weights, lambda_)


def bce_gradient(p: ScoreMap, target, z: ConfidenceMask, lambda_: float = 1.0) -> np.ndarray:
    """d(masked_bce)/dp, per pixel."""
    if z.n != p.n:
        raise ShapeMismatchError(f"confidence mask has length {z.n}, expected {p.n}")
    target = _vector(target, p.n, "objective")
    values = p.values
    return z.weights * (-lambda_ * target / values + (1.0 - target) / (1.0 - values))


def confidence_vector(pseudo_scores, eta: float) -> np.ndarray:
    if not 0.5 < eta < 1.0:
        raise UsageError(f"eta must lie in (0.5, 1), got {eta}")
    scores = np.asarray(pseudo_scores, dtype=np.float64).reshape(-1)
    return (scores > eta).astype(np.float64)


def p2p_confidence(M_st: MatchMatrix, zeta) -> ConfidenceMask:
    """z = M_st zeta."""
    return ConfidenceMask(M_st.dot(zeta))


def p2r_confidence(M_st: MatchMatrix, zeta, beta: NeighborhoodMask) -> ConfidenceMask:
    """z = M_st zeta + (1 - beta): far-away pixels count as reliable background."""
    beta_values = _vector(beta.beta, M_st.n, "beta")
    z = M_st.dot(zeta) + (1.0 - beta_values)
    if not np.all((z == 0.0) | (z == 1.0)):
        bad = np.flatnonzero((z != 0.0) & (z != 1.0))
        raise InvariantError(f"confidence entries outside {{0, 1}} at rows {bad[:10].tolist()}")
    return ConfidenceMask(z)


def confidence_for(result: MatchResult, zeta) -> ConfidenceMask:
    if result.scheme == MatchingScheme.P2R:
        return p2r_confidence(result.region_matrix, zeta, result.beta)
    return p2p_confidence(result.region_matrix, zeta)


def verify_background_vanishes(M_st, zeta, p_s: ScoreMap) -> Tuple[bool, float]:
    """
    Evaluate the background term of the masked loss with z = M_st zeta and
    target M_st 1. Each row of M_st is all-zero or one-hot, so
    z * (1 - target) is identically zero and so is the term.
    """
    if not isinstance(M_st, MatchMatrix):
        M_st = MatchMatrix.from_dense(M_st)
    if M_st.n != p_s.n:
        raise ShapeMismatchError(f"match matrix has {M_st.n} rows, score map has {p_s.n} pixels")
    residual = masked_bce(p_s, M_st.ones(), p2p_confidence(M_st, zeta)).background_term
    return residual == 0.0, residual


def combined_loss(L_l: float, L_u: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * L_u + (1.0 - alpha) * L_l


def labeled_loss(
    scores: ScoreMap,
    gt: PointAnnotation,
    matcher: Matcher,
    lambda_: float = 1.0,
    validity: Optional[np.ndarray] = None,
) -> Tuple[LossBreakdown, np.ndarray, MatchResult]:
    """
    Loss on ground-truth points: match, then weighted BCE against the
    objective. Returns the breakdown, dL/dp and the match result.
    """
    result = matcher.objective(scores, gt)
    z = ConfidenceMask.ones(scores.n)
    if validity is not None:
        z = z.masked(validity)
    return masked_bce(scores, result.objective, z, lambda_), bce_gradient(scores, result.objective, z, lambda_), result


def unlabeled_loss(
    student: ScoreMap,
    pseudo_points: PointAnnotation,
    pseudo_scores,
    matcher: Matcher,
    eta: float,
    lambda_: float = 1.0,
    validity: Optional[np.ndarray] = None,
) -> Tuple[LossBreakdown, np.ndarray, MatchResult, ConfidenceMask]:
    """
    Loss on teacher pseudo-labels: match the student map to the pseudo
    points, gate each point by its teacher score and apply the confidence
    mask (multiplied by ``validity`` when cutout hides part of the input).
    """
    result = matcher.objective(student, pseudo_points)
    zeta = confidence_vector(pseudo_scores, eta)
    z = confidence_for(result, zeta)
    if validity is not None:
        z = z.masked(validity)
    breakdown = masked_bce(student, result.objective, z, lambda_)
    return breakdown, bce_gradient(student, result.objective, z, lambda_), result, z
