#config.py

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import UsageError

logger = logging.getLogger(__name__)

CONFIG_PATH_ENV = "P2R_CONFIG_PATH"
DEFAULT_CONFIG_FILE = "config.yaml"
OUTPUT_DIR_ENV = "P2R_OUTPUT_DIR"


class MatchingScheme(str, Enum):
    P2P = "p2p"
    P2R = "p2r"


class CostTransform(str, Enum):
    IDENTITY = "identity"
    INVERSE_SIGMOID = "inverse_sigmoid"


class DecoderKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


class AggregateMode(str, Enum):
    MEAN = "mean"
    GLOBAL = "global"


class MatchingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau: float = Field(8.0, ge=0.0)
    mu: float = Field(64.0, gt=0.0)
    cost_score_transform: CostTransform = CostTransform.INVERSE_SIGMOID


class DecoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: DecoderKind = DecoderKind.LINEAR
    radius: int = Field(5, ge=1)
    channels: int = Field(4, ge=1)
    hidden: int = Field(8, ge=1)
    init_bias: float = -4.6
    init_scale: float = Field(0.01, ge=0.0)

    @field_validator("radius")
    @classmethod
    def _odd_radius(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"receptive field must be odd, got {value}")
        return value


class TrainConfig(BaseModel):
    """
    Flat training configuration. Keys mirror the config-file keys and the
    ``train`` command flags one to one.
    """

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    epochs: int = Field(300, ge=1)
    warmup_epochs: int = Field(100, ge=0)
    iterations_per_epoch: int = Field(2, ge=1)
    alpha_step: float = Field(0.01, ge=0.0)
    alpha_cap: float = Field(2.0 / 3.0, ge=0.0, le=1.0)
    eta: float = Field(0.7, gt=0.5, lt=1.0)
    tau: float = Field(8.0, ge=0.0)
    mu: float = Field(64.0, gt=0.0)
    lambda_: float = Field(1.0, gt=0.0, alias="lambda")
    cost_score_transform: CostTransform = CostTransform.INVERSE_SIGMOID
    ema_momentum: float = Field(0.99, ge=0.0, lt=1.0)
    lr_decoder: float = Field(5e-5, gt=0.0)
    batch_size: int = Field(16, ge=1)
    matching_scheme: MatchingScheme = MatchingScheme.P2R
    decoder: DecoderKind = DecoderKind.LINEAR
    radius: int = Field(5, ge=1)
    hidden: int = Field(8, ge=1)
    init_bias: float = -4.6
    init_scale: float = Field(0.01, ge=0.0)
    evaluate_teacher: bool = True
    val_every: int = Field(1, ge=1)
    snapshot_epochs: List[int] = Field(default_factory=list)
    seed: int = 0

    @field_validator("radius")
    @classmethod
    def _odd_radius(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"receptive field must be odd, got {value}")
        return value

    @model_validator(mode="after")
    def _warmup_before_end(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must be smaller than epochs ({self.epochs})"
            )
        return self

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        """Desk-scale profile: 24x24 grids, a linear decoder, minutes on a CPU."""
        values: Dict[str, Any] = {"lr_decoder": 1e-2, "mu": 4.0}
        values.update(overrides)
        return cls.model_validate(values)

    @property
    def matching(self) -> MatchingConfig:
        return MatchingConfig(tau=self.tau, mu=self.mu, cost_score_transform=self.cost_score_transform)

    def decoder_config(self, channels: int) -> DecoderConfig:
        return DecoderConfig(
            kind=self.decoder,
            radius=self.radius,
            channels=channels,
            hidden=self.hidden,
            init_bias=self.init_bias,
            init_scale=self.init_scale,
        )

    def replace(self, **changes: Any) -> "TrainConfig":
        values = self.model_dump(by_alias=True)
        if "lambda_" in changes:
            changes["lambda"] = changes.pop("lambda_")
        values.update(changes)
        return validate_train_config(values)

    def snapshot(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)


class SceneConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scenes: int = Field(200, ge=1)
    val_scenes: int = Field(40, ge=0)
    points_min: int = Field(4, ge=0)
    points_max: int = Field(12, ge=0)
    height: int = Field(24, ge=1)
    width: int = Field(24, ge=1)
    channels: int = Field(4, ge=1)
    noise_sigma: float = Field(0.1, ge=0.0)
    labeled_frac: float = Field(0.05, ge=0.0, le=1.0)
    domain_shift: float = Field(0.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _ordered_range(self) -> "SceneConfig":
        if self.points_min > self.points_max:
            raise ValueError(f"points range {self.points_min}..{self.points_max} is empty")
        return self


class BenchConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(8640, ge=1)
    m: int = Field(775, ge=0)
    repeats: int = Field(20, ge=1)
    seed: int = 0
    parallel: bool = False

    @model_validator(mode="after")
    def _enough_pixels(self) -> "BenchConfig":
        if self.n < self.m:
            raise ValueError(f"benchmark needs n >= m, got n={self.n}, m={self.m}")
        return self


def _parse_key_value(text: str, path: str) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        values[key] = yaml.safe_load(value) if value else None
    return values


def read_config_file(config_path: str) -> Dict[str, Any]:
    """Read a YAML file or a flat ``key = value`` file into a dict."""
    try:
        with open(config_path, "r") as f:
            text = f.read()
    except OSError as e:
        logger.error(f"Failed to load configuration: {e}")
        raise UsageError(f"Error loading configuration: {str(e)}")
    if Path(config_path).suffix.lower() in (".yaml", ".yml"):
        try:
            values = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise UsageError(f"Error parsing configuration {config_path}: {str(e)}")
        if not isinstance(values, dict):
            raise UsageError(f"configuration {config_path} must be a mapping")
        return values
    return _parse_key_value(text, config_path)


def validate_train_config(values: Mapping[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.model_validate(dict(values))
    except ValidationError as e:
        raise UsageError(f"invalid training configuration: {_summarize(e)}")


def _summarize(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def load_train_config(
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    desk: bool = True,
) -> TrainConfig:
    """
    Resolve a TrainConfig: defaults < desk profile < config file < overrides.

    ``config_path`` falls back to the ``P2R_CONFIG_PATH`` environment variable,
    then to ``config.yaml`` in the working directory when that file exists.
    ``None`` values in ``overrides`` are ignored so unset CLI flags do not
    shadow the file.
    """
    values: Dict[str, Any] = {}
    if desk:
        values.update(TrainConfig.desk().model_dump(by_alias=True))
    config_path = config_path or os.getenv(CONFIG_PATH_ENV)
    if not config_path and Path(DEFAULT_CONFIG_FILE).is_file():
        config_path = DEFAULT_CONFIG_FILE
    if config_path:
        logger.info("loading configuration from %s", config_path)
        values.update(read_config_file(config_path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return validate_train_config(values)


def validate_model(model: type, values: Mapping[str, Any]):
    """Validate any of the config models, turning pydantic errors into UsageError."""
    try:
        return model.model_validate({k: v for k, v in values.items() if v is not None})
    except ValidationError as e:
        raise UsageError(f"invalid {model.__name__}: {_summarize(e)}")
