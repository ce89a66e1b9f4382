#semisup.py

"""
Mean-teacher semi-supervised training on synthetic scenes.

Each step draws a labeled batch and, once alpha > 0, an unlabeled batch.
The teacher scores the weakly augmented view of an unlabeled scene; every
pixel above 0.5 becomes a pseudo point. The student is trained on the
strongly augmented view of the same scene against those pseudo points,
with the loss masked by the confidence of each point. The teacher only
ever changes through the EMA update that follows each optimizer step.
"""

import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import MatchingScheme, TrainConfig
from .core import PointAnnotation, ScoreMap
from .counter import (
    AdamState,
    Decoder,
    adam_step,
    build_decoder,
    count_estimate,
    decoder_forward,
    save_checkpoint,
)
from .exceptions import DatasetError, InvariantError, NanLossError, ShapeMismatchError, UsageError
from .loss import LossBreakdown, confidence_vector, labeled_loss, unlabeled_loss
from .matching import Matcher, build_matcher
from .psam import BlockDecoder, compute_psam, extract_blocks
from .scenes import SceneDataset, SceneSample, augment_strong, augment_weak
from .utils import JsonlWriter, PathLike

logger = logging.getLogger(__name__)

SEED_BOUND = 2 ** 32


def extract_pseudo_labels(teacher_scores: ScoreMap) -> Tuple[PointAnnotation, np.ndarray]:
    """Every pixel scoring strictly above 0.5, with its score."""
    pixels = np.flatnonzero(teacher_scores.values > 0.5)
    coords = teacher_scores.coords[pixels]
    return PointAnnotation(coords), teacher_scores.values[pixels].copy()


def ema_update(teacher_params, student_params, momentum: float) -> np.ndarray:
    teacher_params = np.asarray(teacher_params, dtype=np.float64)
    student_params = np.asarray(student_params, dtype=np.float64)
    if teacher_params.shape != student_params.shape:
        raise ShapeMismatchError(
            f"teacher {teacher_params.shape} and student {student_params.shape} parameters differ"
        )
    if not 0.0 <= momentum < 1.0:
        raise UsageError(f"EMA momentum must lie in [0, 1), got {momentum}")
    return momentum * teacher_params + (1.0 - momentum) * student_params


def alpha_schedule(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    if epoch < config.warmup_epochs:
        return 0.0
    return min(config.alpha_cap, (epoch - config.warmup_epochs) * config.alpha_step)


def count_metrics(predicted: Sequence[int], true: Sequence[int]) -> Tuple[float, float]:
    """(MAE, root-mean-square error) of predicted against true counts."""
    errors = np.asarray(predicted, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    if errors.size == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    return float(np.mean(np.abs(errors))), float(np.sqrt(np.mean(errors ** 2)))


def predicted_counts(model: Decoder, samples: Sequence[SceneSample]) -> List[int]:
    return [count_estimate(decoder_forward(model, s.features)) for s in samples]


def evaluate(model: Decoder, samples: Sequence[SceneSample]) -> Tuple[float, float]:
    if not samples:
        raise DatasetError("cannot evaluate an empty dataset")
    return count_metrics(predicted_counts(model, samples), [s.count for s in samples])


@dataclass(frozen=True)
class PseudoLabels:
    points: PointAnnotation
    scores: np.ndarray
    confident: np.ndarray
    teacher_scores: ScoreMap


def record_pseudo_labels(teacher: Decoder, sample: SceneSample, eta: float, seed: Optional[int] = None) -> PseudoLabels:
    """Teacher pseudo points on ``sample`` (weakly augmented when ``seed`` is given) and their zeta gate."""
    view = augment_weak(sample, seed) if seed is not None else sample
    scores = decoder_forward(teacher, view.features)
    points, point_scores = extract_pseudo_labels(scores)
    return PseudoLabels(points, point_scores, confidence_vector(point_scores, eta), scores)


@dataclass
class TrainResult:
    records: List[Dict[str, Any]]
    student: Decoder
    teacher: Decoder
    snapshots: Dict[int, Decoder] = field(default_factory=dict)
    config: Optional[TrainConfig] = None
    wall_times: List[float] = field(default_factory=list)

    @property
    def evaluated(self) -> Decoder:
        if self.config is not None and not self.config.evaluate_teacher:
            return self.student
        return self.teacher


def abort_record(
    epoch: int, iteration: int, alpha: float, offending: Sequence[str], stats: Dict[str, float]
) -> Dict[str, Any]:
    """JSON-safe diagnostic for an aborted step; non-finite values are written as strings."""
    values = {key: value if math.isfinite(value) else str(value) for key, value in stats.items()}
    return {"aborted": True, "epoch": epoch, "step": iteration, "alpha": alpha, "offending": list(offending), **values}


def timing_path(log_path: PathLike) -> Path:
    """``train.log.jsonl`` -> ``train.timing.jsonl``; wall times stay out of the metrics log."""
    log_path = Path(log_path)
    stem = log_path.name[: -len(".log.jsonl")] if log_path.name.endswith(".log.jsonl") else log_path.stem
    return log_path.with_name(f"{stem}.timing.jsonl")


class _Trainer:
    def __init__(self, dataset: SceneDataset, config: TrainConfig):
        if not dataset.labeled:
            raise DatasetError("training needs at least one labeled scene")
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        channels = dataset.labeled[0].features.channels
        self.student = build_decoder(config.decoder_config(channels), self.rng)
        self.teacher = self.student.copy()
        self.adam = AdamState.zeros(self.student.parameters().size)
        self.matcher: Matcher = build_matcher(config.matching_scheme, config.matching)

    def _draw(self, samples: List[SceneSample]) -> List[Tuple[SceneSample, int]]:
        picks = self.rng.integers(0, len(samples), size=self.config.batch_size)
        seeds = self.rng.integers(0, SEED_BOUND, size=self.config.batch_size)
        return [(samples[int(i)], int(s)) for i, s in zip(picks, seeds)]

    def _labeled_batch(self) -> Tuple[LossBreakdown, np.ndarray]:
        total, grad = LossBreakdown.zero(), np.zeros_like(self.adam.m)
        for sample, seed in self._draw(self.dataset.labeled):
            view = augment_weak(sample, seed)
            blocks = extract_blocks(view.features, self.student.radius)
            scores = ScoreMap(self.student.forward_blocks(blocks.flat), view.features.height, view.features.width)
            breakdown, d_scores, _ = labeled_loss(scores, view.gt_points, self.matcher, self.config.lambda_)
            total = total + breakdown
            grad += self.student.backward_blocks(blocks.flat, d_scores).flat()
        return total, grad

    def _unlabeled_batch(self) -> Tuple[LossBreakdown, np.ndarray, int]:
        total, grad, pseudo = LossBreakdown.zero(), np.zeros_like(self.adam.m), 0
        for sample, seed in self._draw(self.dataset.unlabeled):
            weak = augment_weak(sample, seed)
            points, point_scores = extract_pseudo_labels(decoder_forward(self.teacher, weak.features))
            strong, validity = augment_strong(sample, seed)
            blocks = extract_blocks(strong.features, self.student.radius)
            scores = ScoreMap(self.student.forward_blocks(blocks.flat), strong.features.height, strong.features.width)
            breakdown, d_scores, _, _ = unlabeled_loss(
                scores, points, point_scores, self.matcher, self.config.eta, self.config.lambda_, validity
            )
            if self.config.matching_scheme == MatchingScheme.P2P and breakdown.background_term != 0.0:
                raise InvariantError(
                    f"P2P unlabeled background term is {breakdown.background_term!r}, expected exactly 0"
                )
            total = total + breakdown
            pseudo += points.m
            grad += self.student.backward_blocks(blocks.flat, d_scores).flat()
        return total, grad, pseudo

    def step(self, epoch: int, alpha: float, iteration: int = 0) -> Dict[str, float]:
        batch = float(self.config.batch_size)
        labeled, grad = self._labeled_batch()
        grad *= (1.0 - alpha) / batch
        unlabeled, pseudo = LossBreakdown.zero(), 0
        if alpha > 0.0 and self.dataset.unlabeled:
            unlabeled, u_grad, pseudo = self._unlabeled_batch()
            grad += u_grad * (alpha / batch)
        stats = {
            "labeled_loss": labeled.total / batch,
            "unlabeled_loss": unlabeled.total / batch,
            "unlabeled_fg": unlabeled.foreground_term / batch,
            "unlabeled_bg": unlabeled.background_term / batch,
            "pseudo_count": pseudo / batch,
        }
        offending = [key for key, value in stats.items() if not math.isfinite(value)]
        if not np.all(np.isfinite(grad)):
            offending.append("gradient")
        if offending:
            raise NanLossError(
                f"non-finite {', '.join(offending)} at epoch {epoch}, step {iteration}",
                abort_record(epoch, iteration, alpha, offending, stats),
            )
        params, self.adam = adam_step(self.student.parameters(), grad, self.adam, self.config.lr_decoder)
        if not np.all(np.isfinite(params)):
            raise NanLossError(
                f"non-finite parameters at epoch {epoch}, step {iteration}",
                abort_record(epoch, iteration, alpha, ["parameters"], stats),
            )
        self.student = self.student.with_parameters(params)
        self.teacher = self.teacher.with_parameters(
            ema_update(self.teacher.parameters(), self.student.parameters(), self.config.ema_momentum)
        )
        return stats

    @property
    def evaluated(self) -> Decoder:
        return self.teacher if self.config.evaluate_teacher else self.student


def train(
    dataset: SceneDataset,
    config: TrainConfig,
    *,
    log_path: Optional[PathLike] = None,
    progress: bool = False,
) -> TrainResult:
    """
    Run the full schedule; one JSON-lines record per epoch in ``log_path`` and
    its wall time in the matching timing file. A non-finite step appends an
    abort record to the log before ``NanLossError`` propagates.
    """
    trainer = _Trainer(dataset, config)
    records: List[Dict[str, Any]] = []
    wall_times: List[float] = []
    snapshots: Dict[int, Decoder] = {}
    if 0 in config.snapshot_epochs:
        snapshots[0] = trainer.evaluated.copy()
    writer = JsonlWriter(log_path) if log_path is not None else None
    timings = JsonlWriter(timing_path(log_path)) if log_path is not None else None
    logger.info(
        "training %s scheme for %d epochs on %d labeled / %d unlabeled scenes",
        config.matching_scheme.value, config.epochs, len(dataset.labeled), len(dataset.unlabeled),
    )
    epochs = tqdm(range(config.epochs), desc=f"train {config.matching_scheme.value}", disable=not progress, file=sys.stderr)
    try:
        for epoch in epochs:
            started = time.perf_counter()
            alpha = alpha_schedule(epoch, config)
            steps = [trainer.step(epoch, alpha, i) for i in range(config.iterations_per_epoch)]
            record: Dict[str, Any] = {"epoch": epoch, "alpha": alpha}
            for key in steps[0]:
                record[key] = float(np.mean([s[key] for s in steps]))
            last = epoch == config.epochs - 1
            record["val_mae"] = record["val_mse"] = record["mean_count"] = None
            if dataset.val and (last or (epoch + 1) % config.val_every == 0):
                counts = predicted_counts(trainer.evaluated, dataset.val)
                record["val_mae"], record["val_mse"] = count_metrics(counts, [s.count for s in dataset.val])
                record["mean_count"] = float(np.mean(counts))
            records.append(record)
            wall_times.append(time.perf_counter() - started)
            if writer is not None:
                writer.write(record)
                timings.write({"epoch": epoch, "wall_time": wall_times[-1]})
            if epoch + 1 in config.snapshot_epochs:
                snapshots[epoch + 1] = trainer.evaluated.copy()
            logger.debug("epoch %d: %s", epoch, record)
    except NanLossError as e:
        if writer is not None:
            writer.write(e.record)
        e.records, e.snapshots = records, snapshots
        raise
    finally:
        if writer is not None:
            writer.close()
            timings.close()
    final = records[-1]
    logger.info("finished: val MAE %s, val MSE %s", final["val_mae"], final["val_mse"])
    return TrainResult(records, trainer.student, trainer.teacher, snapshots, config, wall_times)


def save_result(result: TrainResult, out_dir: PathLike) -> List[Path]:
    out_dir = Path(out_dir)
    paths = [save_checkpoint(result.student, out_dir, "student"), save_checkpoint(result.teacher, out_dir, "teacher")]
    for epoch, model in sorted(result.snapshots.items()):
        paths.append(save_checkpoint(model, out_dir, f"snapshot_{epoch:04d}"))
    return paths


# --- breakdown study ----------------------------------------------------------

def mean_sorted_psam(decoder: BlockDecoder, samples: Sequence[SceneSample]) -> np.ndarray:
    """Descending values of the foreground PSAM patch averaged over all samples' foreground pixels."""
    total, count = None, 0
    for sample in samples:
        result = compute_psam(sample.features, decoder)
        if result.foreground.size == 0:
            continue
        patch_sum = result.patches[result.foreground].sum(axis=0)
        total = patch_sum if total is None else total + patch_sum
        count += result.foreground.size
    if total is None:
        return np.zeros(0)
    return np.sort((total / count).reshape(-1))[::-1]


def dominance(upper: np.ndarray, lower: np.ndarray) -> float:
    """Fraction of sorted positions where ``upper`` exceeds ``lower``."""
    if upper.size == 0 or upper.shape != lower.shape:
        return 0.0
    return float(np.mean(upper > lower))


@dataclass
class StudyReport:
    baseline_mae: float
    p2r_mae: float
    true_mean_count: float
    p2p_peak_count: Optional[float]
    p2p_aborted: bool
    psam_dominance: Optional[float]
    p2p_abort: Optional[Dict[str, Any]] = None
    records: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    models: Dict[str, Decoder] = field(default_factory=dict)

    @property
    def p2r_improves(self) -> bool:
        return self.p2r_mae < self.baseline_mae

    @property
    def p2p_breaks_down(self) -> bool:
        return self.p2p_aborted or (self.p2p_peak_count is not None and self.p2p_peak_count > 2.0 * self.true_mean_count)

    @property
    def psam_over_activated(self) -> Optional[bool]:
        """None when the P2P run stopped before model-U existed."""
        if self.psam_dominance is None:
            return None
        return self.psam_dominance >= 0.8

    def summary(self) -> Dict[str, Any]:
        return {
            "baseline_mae": self.baseline_mae,
            "p2r_mae": self.p2r_mae,
            "p2r_improves": self.p2r_improves,
            "true_mean_count": self.true_mean_count,
            "p2p_peak_count": self.p2p_peak_count,
            "p2p_aborted": self.p2p_aborted,
            "p2p_abort": self.p2p_abort,
            "p2p_breaks_down": self.p2p_breaks_down,
            "psam_dominance": self.psam_dominance,
            "psam_over_activated": self.psam_over_activated,
        }


def _peak_count(records: Sequence[Dict[str, Any]], warmup: int) -> Optional[float]:
    counts = [r["mean_count"] for r in records[warmup:] if r["mean_count"] is not None]
    return max(counts) if counts else None


def run_breakdown_study(
    dataset: SceneDataset,
    config: TrainConfig,
    *,
    observe_epochs: int = 100,
    out_dir: Optional[PathLike] = None,
    progress: bool = False,
) -> StudyReport:
    """
    Labeled-only baseline, P2R semi-supervised run and a P2P run whose alpha
    rises to 1, observed for ``observe_epochs`` epochs after warmup. Model-L
    is the P2P run's model at the end of warmup, model-U its final model.
    """
    if not dataset.val:
        raise DatasetError("the breakdown study needs validation scenes")
    warmup = config.warmup_epochs
    out = Path(out_dir) if out_dir is not None else None

    def log(name: str) -> Optional[Path]:
        return out / f"{name}.log.jsonl" if out is not None else None

    baseline = train(dataset, config.replace(alpha_cap=0.0), log_path=log("baseline"), progress=progress)
    p2r = train(dataset, config.replace(matching_scheme=MatchingScheme.P2R.value), log_path=log("p2r"), progress=progress)
    p2p_config = config.replace(
        matching_scheme=MatchingScheme.P2P.value,
        alpha_cap=1.0,
        epochs=warmup + observe_epochs,
        snapshot_epochs=[warmup, warmup + observe_epochs],
    )
    true_mean = dataset.mean_count("val")
    models: Dict[str, Decoder] = {"baseline": baseline.evaluated, "p2r": p2r.evaluated}
    records = {"baseline": baseline.records, "p2r": p2r.records}
    try:
        p2p = train(dataset, p2p_config, log_path=log("p2p"), progress=progress)
    except NanLossError as e:
        logger.warning("P2P run aborted: %s", e)
        records["p2p"] = e.records
        if warmup in e.snapshots:
            models["model_l"] = e.snapshots[warmup]
        report = StudyReport(
            baseline_mae=baseline.records[-1]["val_mae"],
            p2r_mae=p2r.records[-1]["val_mae"],
            true_mean_count=true_mean,
            p2p_peak_count=_peak_count(e.records, warmup),
            p2p_aborted=True,
            psam_dominance=None,
            p2p_abort=e.record,
            records=records,
            models=models,
        )
        logger.info("breakdown study: %s", report.summary())
        return report
    records["p2p"] = p2p.records
    model_l, model_u = p2p.snapshots[warmup], p2p.snapshots[warmup + observe_epochs]
    models.update({"model_l": model_l, "model_u": model_u})
    report = StudyReport(
        baseline_mae=baseline.records[-1]["val_mae"],
        p2r_mae=p2r.records[-1]["val_mae"],
        true_mean_count=true_mean,
        p2p_peak_count=_peak_count(p2p.records, warmup),
        p2p_aborted=False,
        psam_dominance=dominance(mean_sorted_psam(model_u, dataset.val), mean_sorted_psam(model_l, dataset.val)),
        records=records,
        models=models,
    )
    logger.info("breakdown study: %s", report.summary())
    return report
