#bench.py

"""
Wall-clock comparison of the full P2P and P2R labeled losses on one random
instance: cost construction, matching and the BCE reduction.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .config import BenchConfig, MatchingConfig
from .core import PointAnnotation, ScoreMap
from .loss import weighted_bce
from .matching import p2p_objective, p2r_objective
from .utils import PathLike, save_csv, write_json

logger = logging.getLogger(__name__)


def grid_shape(n: int) -> Tuple[int, int]:
    """The most nearly square (h, w) with h * w == n and h <= w."""
    h = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
    return h, n // h


def random_instance(n: int, m: int, seed: int) -> Tuple[ScoreMap, PointAnnotation]:
    h, w = grid_shape(n)
    rng = np.random.default_rng(seed)
    scores = ScoreMap(rng.uniform(0.0, 1.0, size=n), h, w)
    # distinct pixel centres, so every point owns a non-empty region
    pixels = rng.choice(n, size=m, replace=False)
    return scores, PointAnnotation(scores.coords[pixels])


def p2p_full_loss(scores: ScoreMap, points: PointAnnotation, matching: MatchingConfig) -> float:
    result = p2p_objective(scores, points, matching.tau, matching.cost_score_transform)
    return weighted_bce(scores, result.objective).total


def p2r_full_loss(scores: ScoreMap, points: PointAnnotation, matching: MatchingConfig) -> float:
    result = p2r_objective(scores, points, matching.tau, matching.mu, matching.cost_score_transform)
    return weighted_bce(scores, result.objective).total


def _time_once(scores: ScoreMap, points: PointAnnotation, matching: MatchingConfig) -> Tuple[float, float]:
    start = time.perf_counter()
    p2p_full_loss(scores, points, matching)
    p2p = time.perf_counter() - start
    start = time.perf_counter()
    p2r_full_loss(scores, points, matching)
    return p2p, time.perf_counter() - start


@dataclass
class BenchReport:
    n: int
    m: int
    repeats: int
    seed: int
    parallel: bool
    p2p_times: List[float] = field(default_factory=list)
    p2r_times: List[float] = field(default_factory=list)

    @property
    def p2p_median(self) -> float:
        return float(np.median(self.p2p_times))

    @property
    def p2r_median(self) -> float:
        return float(np.median(self.p2r_times))

    @property
    def ratio(self) -> float:
        return self.p2p_median / self.p2r_median if self.p2r_median > 0 else math.inf

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n": self.n,
            "m": self.m,
            "repeats": self.repeats,
            "seed": self.seed,
            "parallel": self.parallel,
            "p2p": {"mean": float(np.mean(self.p2p_times)), "median": self.p2p_median},
            "p2r": {"mean": float(np.mean(self.p2r_times)), "median": self.p2r_median},
            "ratio": self.ratio,
        }

    def write(self, out_dir: PathLike) -> List[Path]:
        out_dir = Path(out_dir)
        rows = [(i, p, r) for i, (p, r) in enumerate(zip(self.p2p_times, self.p2r_times))]
        return [
            save_csv(out_dir / "bench.csv", ["repeat", "p2p_seconds", "p2r_seconds"], rows),
            write_json(out_dir / "bench.json", self.to_dict()),
        ]


def run_bench(config: BenchConfig, matching: MatchingConfig = MatchingConfig()) -> BenchReport:
    """
    Time both losses ``repeats`` times on one seeded instance. BLAS is pinned
    to one thread; ``parallel`` spreads the repeats over joblib workers.
    """
    scores, points = random_instance(config.n, config.m, config.seed)
    logger.info("benchmarking n=%d, m=%d over %d repeats", config.n, config.m, config.repeats)
    with threadpool_limits(limits=1):
        if config.parallel:
            timings = Parallel(n_jobs=-1)(
                delayed(_time_once)(scores, points, matching) for _ in range(config.repeats)
            )
        else:
            timings = [_time_once(scores, points, matching) for _ in range(config.repeats)]
    report = BenchReport(
        config.n, config.m, config.repeats, config.seed, config.parallel,
        [p for p, _ in timings], [r for _, r in timings],
    )
    logger.info(
        "median P2P %.4fs, median P2R %.4fs, ratio %.1f", report.p2p_median, report.p2r_median, report.ratio
    )
    return report
