#scenes.py

"""
Synthetic scenes standing in for the output of a frozen encoder.

Each planted point leaves a Gaussian bump (spatial sigma 1) in every
channel, scaled by a fixed per-channel signature. Overlapping bumps are
combined by a per-pixel maximum so each planted pixel stays a strict local
maximum of the noise-free field.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .config import SceneConfig
from .core import FeatureMap, PointAnnotation, grid_coords
from .exceptions import DataError, DatasetError
from .utils import PathLike, atomic_write_text, load_features, load_points, save_points, save_tensor

logger = logging.getLogger(__name__)

SIGNATURE_PATTERN = (1.0, 0.8, 0.6, 0.4)
BUMP_SIGMA = 1.0
MIN_SEPARATION = 2.0
JITTER_SIGMA = 0.1
CUTOUT_AREA = (0.10, 0.25)
SHIFT_AMPLITUDE_DROP = 0.25
MANIFEST_NAME = "manifest.csv"
SCENES_DIR = "scenes"


def channel_signature(channels: int) -> np.ndarray:
    return np.resize(np.array(SIGNATURE_PATTERN), channels)


@dataclass(frozen=True)
class SceneSample:
    features: FeatureMap
    gt_points: PointAnnotation
    labeled: bool = False
    seed: int = 0
    scene_id: str = ""

    @property
    def count(self) -> int:
        return self.gt_points.m


def _place_points(m_points: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy placement over a random pixel order, keeping MIN_SEPARATION between points."""
    chosen: List[Tuple[int, int]] = []
    for index in rng.permutation(h * w):
        if len(chosen) == m_points:
            break
        row, col = divmod(int(index), w)
        if all((row - r) ** 2 + (col - c) ** 2 >= MIN_SEPARATION ** 2 for r, c in chosen):
            chosen.append((row, col))
    if len(chosen) < m_points:
        raise DataError(
            f"cannot place {m_points} points at separation {MIN_SEPARATION:g} on a {h}x{w} grid"
        )
    return np.array(chosen, dtype=np.float64).reshape(-1, 2)


def bump_field(points: PointAnnotation, h: int, w: int) -> np.ndarray:
    """Per-pixel maximum of unit Gaussian bumps centred on the points."""
    if points.m == 0:
        return np.zeros((h, w))
    diff = grid_coords(h, w)[:, None, :] - points.coords[None, :, :]
    bumps = np.exp(-(diff ** 2).sum(axis=2) / (2.0 * BUMP_SIGMA ** 2))
    return bumps.max(axis=1).reshape(h, w)


def generate_scene(
    m_points: int,
    h: int,
    w: int,
    c: int,
    noise_sigma: float,
    seed: int,
    domain_shift: float = 0.0,
    amplitude: float = 1.0,
    labeled: bool = False,
    scene_id: str = "",
) -> SceneSample:
    if m_points < 0:
        raise DataError(f"point count must be >= 0, got {m_points}")
    if noise_sigma < 0 or domain_shift < 0:
        raise DataError("noise_sigma and domain_shift must be >= 0")
    rng = np.random.default_rng(seed)
    points = PointAnnotation(_place_points(m_points, h, w, rng))
    sigma = noise_sigma * (1.0 + domain_shift)
    scale = amplitude * max(0.0, 1.0 - SHIFT_AMPLITUDE_DROP * domain_shift)
    signal = scale * channel_signature(c)[:, None, None] * bump_field(points, h, w)[None]
    noise = rng.normal(0.0, sigma, size=(c, h, w)) if sigma > 0 else np.zeros((c, h, w))
    return SceneSample(FeatureMap(signal + noise), points, labeled=labeled, seed=seed, scene_id=scene_id)


# --- augmentation -------------------------------------------------------------

def _weak(sample: SceneSample, rng: np.random.Generator, force_flip: Optional[bool]) -> SceneSample:
    flip = rng.random() < 0.5
    if force_flip is not None:
        flip = force_flip
    if not flip:
        return sample
    width = sample.features.width
    return replace(sample, features=sample.features.flipped(), gt_points=sample.gt_points.flipped(width))


def augment_weak(sample: SceneSample, seed: int, force_flip: Optional[bool] = None) -> SceneSample:
    """Horizontal flip with probability 0.5; points are mirrored with the features."""
    return _weak(sample, np.random.default_rng(seed), force_flip)


def _fitting_rectangle(h: int, w: int, target: float) -> Tuple[int, int]:
    """The in-range (rows, cols) whose area is closest to ``target``; small grids leave few."""
    n = h * w
    low, high = CUTOUT_AREA
    fitting = [
        (rows, cols)
        for rows in range(1, h + 1)
        for cols in range(1, w + 1)
        if low * n - 1e-9 <= rows * cols <= high * n + 1e-9
    ]
    if not fitting:
        logger.error(f"Failed to place a cutout on a {h}x{w} grid")
        raise DataError(f"no rectangle on a {h}x{w} grid covers {low:.0%}-{high:.0%} of its area")
    return min(fitting, key=lambda rc: (abs(rc[0] * rc[1] - target), rc))


def cutout_rectangle(h: int, w: int, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """(top, left, height, width) of a rectangle covering 10-25% of the grid."""
    n = h * w
    low, high = CUTOUT_AREA
    target = rng.uniform(low, high) * n
    aspect = rng.uniform(0.5, 2.0)
    min_rows = max(1, math.ceil(low * n / w))
    rows = int(np.clip(round(math.sqrt(target * aspect)), min_rows, h))
    col_lo = max(1, math.ceil(low * n / rows))
    col_hi = min(w, math.floor(high * n / rows))
    if col_lo <= col_hi:
        cols = int(np.clip(round(target / rows), col_lo, col_hi))
    else:
        rows, cols = _fitting_rectangle(h, w, target)
    top = int(rng.integers(0, h - rows + 1))
    left = int(rng.integers(0, w - cols + 1))
    return top, left, rows, cols


def augment_strong(
    sample: SceneSample, seed: int, force_flip: Optional[bool] = None
) -> Tuple[SceneSample, np.ndarray]:
    """
    Weak augmentation (the same flip as ``augment_weak`` with this seed),
    then feature noise jitter and one cutout rectangle. Returns the sample
    and a flattened validity mask that is 0 inside the cutout.
    """
    rng = np.random.default_rng(seed)
    weak = _weak(sample, rng, force_flip)
    c, h, w = weak.features.data.shape
    data = weak.features.data + rng.normal(0.0, JITTER_SIGMA, size=(c, h, w))
    top, left, rows, cols = cutout_rectangle(h, w, rng)
    data[:, top:top + rows, left:left + cols] = 0.0
    validity = np.ones((h, w))
    validity[top:top + rows, left:left + cols] = 0.0
    return replace(weak, features=FeatureMap(data)), validity.reshape(-1)


# --- datasets -----------------------------------------------------------------

@dataclass
class SceneDataset:
    labeled: List[SceneSample] = field(default_factory=list)
    unlabeled: List[SceneSample] = field(default_factory=list)
    val: List[SceneSample] = field(default_factory=list)
    root: Optional[Path] = None

    @property
    def train(self) -> List[SceneSample]:
        return self.labeled + self.unlabeled

    def __len__(self) -> int:
        return len(self.labeled) + len(self.unlabeled) + len(self.val)

    def mean_count(self, split: str = "val") -> float:
        samples = getattr(self, split)
        return float(np.mean([s.count for s in samples])) if samples else 0.0


def labeled_count(scenes: int, labeled_frac: float) -> int:
    return int(math.floor(labeled_frac * scenes + 0.5))


def build_dataset(config: SceneConfig) -> SceneDataset:
    """In-memory dataset; validation scenes carry the configured domain shift."""
    total = config.scenes + config.val_scenes
    seeds = np.random.SeedSequence(config.seed).generate_state(total)
    rng = np.random.default_rng(config.seed)
    counts = rng.integers(config.points_min, config.points_max + 1, size=total)
    labeled_ids = set(
        rng.choice(config.scenes, size=labeled_count(config.scenes, config.labeled_frac), replace=False).tolist()
    )
    dataset = SceneDataset()
    for index in range(total):
        is_val = index >= config.scenes
        sample = generate_scene(
            int(counts[index]),
            config.height,
            config.width,
            config.channels,
            config.noise_sigma,
            int(seeds[index]),
            domain_shift=config.domain_shift if is_val else 0.0,
            labeled=index in labeled_ids,
            scene_id=f"scene_{index:04d}",
        )
        if is_val:
            dataset.val.append(sample)
        elif sample.labeled:
            dataset.labeled.append(sample)
        else:
            dataset.unlabeled.append(sample)
    logger.info(
        "built %d scenes (%d labeled, %d unlabeled, %d val)",
        total, len(dataset.labeled), len(dataset.unlabeled), len(dataset.val),
    )
    return dataset


def write_dataset(dataset: SceneDataset, out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    scenes_dir = out_dir / SCENES_DIR
    rows = ["id,labeled,split"]
    for split, samples in (("train", dataset.train), ("val", dataset.val)):
        for sample in sorted(samples, key=lambda s: s.scene_id):
            save_tensor(sample.features, scenes_dir / f"{sample.scene_id}.features.p2rt")
            save_points(sample.gt_points, scenes_dir / f"{sample.scene_id}.points.csv")
            rows.append(f"{sample.scene_id},{int(sample.labeled)},{split}")
    manifest = atomic_write_text(out_dir / MANIFEST_NAME, "\n".join(rows) + "\n")
    dataset.root = out_dir
    logger.info("dataset written to %s", out_dir)
    return manifest


def generate_dataset(config: SceneConfig, out_dir: PathLike) -> SceneDataset:
    dataset = build_dataset(config)
    write_dataset(dataset, out_dir)
    return dataset


def load_dataset(directory: PathLike) -> SceneDataset:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    try:
        with open(manifest, "r", newline="") as f:
            entries = list(csv.DictReader(f))
    except OSError as e:
        logger.error(f"Failed to load dataset manifest: {e}")
        raise DatasetError(f"Error loading dataset manifest: {str(e)}")
    if not entries:
        raise DatasetError(f"{manifest} lists no scenes")
    dataset = SceneDataset(root=directory)
    for entry in entries:
        try:
            scene_id, labeled, split = entry["id"], entry["labeled"].strip() == "1", entry["split"].strip()
        except (KeyError, AttributeError):
            raise DatasetError(f"{manifest}: expected columns id,labeled,split")
        features = load_features(directory / SCENES_DIR / f"{scene_id}.features.p2rt")
        points = load_points(directory / SCENES_DIR / f"{scene_id}.points.csv").within(
            features.height, features.width
        )
        sample = SceneSample(features, points, labeled=labeled, scene_id=scene_id)
        if split == "val":
            dataset.val.append(sample)
        elif labeled:
            dataset.labeled.append(sample)
        else:
            dataset.unlabeled.append(sample)
    return dataset
