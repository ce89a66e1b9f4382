#conftest.py

import numpy as np
import pytest

from p2rCount.config import CONFIG_PATH_ENV, OUTPUT_DIR_ENV, SceneConfig, TrainConfig
from p2rCount.core import FeatureMap, PointAnnotation, ScoreMap
from p2rCount.scenes import build_dataset, generate_scene, write_dataset


@pytest.fixture(autouse=True)
def isolated_cwd(tmp_path, monkeypatch):
    """Keep the repository config.yaml and P2R_* variables out of every test."""
    monkeypatch.chdir(tmp_path)
    for name in (CONFIG_PATH_ENV, OUTPUT_DIR_ENV, "P2R_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def line_scores():
    """Four pixels on one row: a confident pixel followed by three weak ones."""
    return ScoreMap(np.array([0.9, 0.1, 0.1, 0.1]), 1, 4)


@pytest.fixture
def grid_2x2():
    return ScoreMap.uniform(0.5, 2, 2)


@pytest.fixture
def one_point_origin():
    return PointAnnotation(np.array([[0.0, 0.0]]))


@pytest.fixture
def random_features(rng):
    return FeatureMap(rng.normal(size=(3, 7, 6)))


@pytest.fixture
def clean_scene():
    return generate_scene(3, 12, 12, 4, 0.0, seed=7)


@pytest.fixture
def tiny_scene_config():
    return SceneConfig(scenes=20, val_scenes=4, points_min=2, points_max=4, height=12, width=12, labeled_frac=0.2, seed=3)


@pytest.fixture
def tiny_dataset(tiny_scene_config):
    return build_dataset(tiny_scene_config)


@pytest.fixture
def tiny_dataset_dir(tmp_path, tiny_dataset):
    write_dataset(tiny_dataset, tmp_path / "data")
    return tmp_path / "data"


@pytest.fixture
def tiny_train_config():
    return TrainConfig.desk(
        epochs=4,
        warmup_epochs=1,
        iterations_per_epoch=1,
        alpha_step=0.5,
        batch_size=2,
        radius=3,
        seed=11,
    )
