#__init__.py
# init file

# Version of the p2rCount package
__version__ = "0.1.0"

from .exceptions import P2RError, UsageError, DataError, AssignmentError, NumericError
from .config import TrainConfig, SceneConfig, BenchConfig, MatchingConfig, DecoderConfig, MatchingScheme
from .core import ScoreMap, PointAnnotation, MatchMatrix, ConfidenceMask, FeatureMap, pixel_coords
from .assignment import CostMatrix, hungarian_assign, brute_force_assign
from .matching import p2p_objective, p2r_objective, build_matcher
from .loss import masked_bce, weighted_bce, combined_loss
from .psam import compute_psam
from .counter import LinearDecoder, MlpDecoder, decoder_forward, decoder_backward, count_estimate
from .semisup import train, evaluate, run_breakdown_study

__all__ = [
    "P2RError",
    "UsageError",
    "DataError",
    "AssignmentError",
    "NumericError",
    "TrainConfig",
    "SceneConfig",
    "BenchConfig",
    "MatchingConfig",
    "DecoderConfig",
    "MatchingScheme",
    "ScoreMap",
    "PointAnnotation",
    "MatchMatrix",
    "ConfidenceMask",
    "FeatureMap",
    "pixel_coords",
    "CostMatrix",
    "hungarian_assign",
    "brute_force_assign",
    "p2p_objective",
    "p2r_objective",
    "build_matcher",
    "masked_bce",
    "weighted_bce",
    "combined_loss",
    "compute_psam",
    "LinearDecoder",
    "MlpDecoder",
    "decoder_forward",
    "decoder_backward",
    "count_estimate",
    "train",
    "evaluate",
    "run_breakdown_study",
]
