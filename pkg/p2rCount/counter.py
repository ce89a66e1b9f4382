#counter.py

"""
Desk-scale point counter.

The encoder is frozen synthetic data, so the trainable model is a small
decoder that reads one ``r x r x c`` block per pixel and outputs a
foreground probability. Forward and backward passes are analytic; every
decoder exposes its parameters as one flat vector for the optimizer and
the EMA teacher.
"""

import json
import logging
from abc import abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError
from scipy.special import expit

from .config import DecoderConfig, DecoderKind
from .core import FeatureMap, ScoreMap
from .exceptions import DataError, ShapeMismatchError, UsageError
from .psam import BlockDecoder, decode_blocks, extract_blocks
from .scenes import channel_signature
from .utils import PathLike, atomic_write_text, load_array, save_array

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DecoderGradients:
    """Gradients of a scalar loss; ``d_features`` holds one ``(c, r, r)`` block per pixel."""

    d_weights: np.ndarray
    d_bias: float
    d_features: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_weights, [self.d_bias]])

    def fold(self, height: int, width: int) -> np.ndarray:
        """Sum the in-grid cells of every block gradient into a ``(c, h, w)`` feature gradient."""
        n, channels, radius, _ = self.d_features.shape
        if n != height * width:
            raise ShapeMismatchError(f"{n} block gradients for a {height}x{width} grid")
        pad = radius // 2
        out = np.zeros((channels, height + 2 * pad, width + 2 * pad))
        grid = self.d_features.reshape(height, width, channels, radius, radius)
        for a in range(radius):
            for b in range(radius):
                out[:, a:a + height, b:b + width] += grid[:, :, :, a, b].transpose(2, 0, 1)
        return out[:, pad:pad + height, pad:pad + width]


class Decoder(BlockDecoder):
    kind: DecoderKind

    def __init__(self, radius: int, channels: int):
        if radius < 1 or radius % 2 == 0:
            raise UsageError(f"receptive field must be a positive odd integer, got {radius}")
        self.radius = radius
        self.channels = channels

    @property
    def block_size(self) -> int:
        return self.channels * self.radius * self.radius

    @abstractmethod
    def parameters(self) -> np.ndarray:
        """All parameters as one flat vector, bias last."""

    @abstractmethod
    def with_parameters(self, params) -> "Decoder":
        pass

    @abstractmethod
    def forward_logits(self, flat_blocks: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def backward_blocks(self, flat_blocks: np.ndarray, upstream: np.ndarray) -> DecoderGradients:
        """Chain ``dL/dp`` back through the sigmoid into parameters and blocks."""

    def forward_blocks(self, flat_blocks: np.ndarray) -> np.ndarray:
        return expit(self.forward_logits(flat_blocks))

    def input_gradient(self, flat_blocks: np.ndarray) -> np.ndarray:
        grads = self.backward_blocks(flat_blocks, np.ones(flat_blocks.shape[0]))
        return grads.d_features.reshape(flat_blocks.shape[0], -1)

    def copy(self) -> "Decoder":
        return self.with_parameters(self.parameters().copy())

    def _check_params(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        if params.size != self.parameters().size:
            raise ShapeMismatchError(f"expected {self.parameters().size} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise DataError("decoder parameters must be finite")
        return params

    def _sigmoid_grad(self, logits: np.ndarray, upstream) -> np.ndarray:
        upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
        if upstream.size != logits.size:
            raise ShapeMismatchError(f"upstream gradient has length {upstream.size}, expected {logits.size}")
        p = expit(logits)
        return upstream * p * (1.0 - p)

    def meta(self) -> dict:
        return {"kind": self.kind.value, "radius": self.radius, "channels": self.channels}


class LinearDecoder(Decoder):
    """p = sigmoid(<weights, block> + bias)."""

    kind = DecoderKind.LINEAR

    def __init__(self, weights, bias: float, radius: int, channels: int):
        super().__init__(radius, channels)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.size != self.block_size:
            raise ShapeMismatchError(f"linear decoder needs {self.block_size} weights, got {weights.size}")
        if not (np.all(np.isfinite(weights)) and np.isfinite(bias)):
            raise DataError("decoder parameters must be finite")
        self.weights = weights
        self.bias = float(bias)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    def with_parameters(self, params) -> "LinearDecoder":
        params = self._check_params(params)
        return LinearDecoder(params[:-1], params[-1], self.radius, self.channels)

    def forward_logits(self, flat_blocks: np.ndarray) -> np.ndarray:
        return flat_blocks @ self.weights + self.bias

    def backward_blocks(self, flat_blocks: np.ndarray, upstream) -> DecoderGradients:
        g = self._sigmoid_grad(self.forward_logits(flat_blocks), upstream)
        d_features = g[:, None] * self.weights[None, :]
        return DecoderGradients(
            d_weights=flat_blocks.T @ g,
            d_bias=float(g.sum()),
            d_features=d_features.reshape(-1, self.channels, self.radius, self.radius),
        )


class MlpDecoder(Decoder):
    """One tanh hidden layer: p = sigmoid(w2 . tanh(W1 block + b1) + bias)."""

    kind = DecoderKind.MLP

    def __init__(self, w1, b1, w2, bias: float, radius: int, channels: int):
        super().__init__(radius, channels)
        w1 = np.asarray(w1, dtype=np.float64)
        self.hidden = w1.shape[0]
        if w1.shape != (self.hidden, self.block_size):
            raise ShapeMismatchError(f"hidden weights must be ({self.hidden}, {self.block_size}), got {w1.shape}")
        self.w1 = w1
        self.b1 = np.asarray(b1, dtype=np.float64).reshape(self.hidden)
        self.w2 = np.asarray(w2, dtype=np.float64).reshape(self.hidden)
        self.bias = float(bias)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.w1.reshape(-1), self.b1, self.w2, [self.bias]])

    def with_parameters(self, params) -> "MlpDecoder":
        params = self._check_params(params)
        return MlpDecoder.unflatten(params, self.hidden, self.radius, self.channels)

    @classmethod
    def unflatten(cls, params, hidden: int, radius: int, channels: int) -> "MlpDecoder":
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        d = channels * radius * radius
        expected = hidden * d + 2 * hidden + 1
        if params.size != expected:
            raise ShapeMismatchError(f"MLP decoder needs {expected} parameters, got {params.size}")
        w1 = params[: hidden * d].reshape(hidden, d)
        b1 = params[hidden * d: hidden * d + hidden]
        w2 = params[hidden * d + hidden: hidden * d + 2 * hidden]
        return cls(w1, b1, w2, params[-1], radius, channels)

    def _hidden(self, flat_blocks: np.ndarray) -> np.ndarray:
        return np.tanh(flat_blocks @ self.w1.T + self.b1)

    def forward_logits(self, flat_blocks: np.ndarray) -> np.ndarray:
        return self._hidden(flat_blocks) @ self.w2 + self.bias

    def backward_blocks(self, flat_blocks: np.ndarray, upstream) -> DecoderGradients:
        h = self._hidden(flat_blocks)
        g = self._sigmoid_grad(h @ self.w2 + self.bias, upstream)
        gh = g[:, None] * self.w2[None, :] * (1.0 - h * h)
        d_weights = np.concatenate([(gh.T @ flat_blocks).reshape(-1), gh.sum(axis=0), h.T @ g])
        return DecoderGradients(
            d_weights=d_weights,
            d_bias=float(g.sum()),
            d_features=(gh @ self.w1).reshape(-1, self.channels, self.radius, self.radius),
        )

    def meta(self) -> dict:
        return {**super().meta(), "hidden": self.hidden}


def build_decoder(config: DecoderConfig, rng: Optional[np.random.Generator] = None) -> Decoder:
    rng = rng if rng is not None else np.random.default_rng(0)
    d = config.channels * config.radius * config.radius
    if config.kind == DecoderKind.LINEAR:
        weights = rng.normal(0.0, config.init_scale, size=d)
        return LinearDecoder(weights, config.init_bias, config.radius, config.channels)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(config.hidden, d))
    w2 = rng.normal(0.0, config.init_scale, size=config.hidden)
    return MlpDecoder(w1, np.zeros(config.hidden), w2, config.init_bias, config.radius, config.channels)


def _check_channels(decoder: Decoder, features: FeatureMap) -> None:
    if features.channels != decoder.channels:
        raise ShapeMismatchError(
            f"channel mismatch: decoder expects {decoder.channels}, features have {features.channels}"
        )


def decoder_forward(decoder: Decoder, features: FeatureMap) -> ScoreMap:
    _check_channels(decoder, features)
    return decode_blocks(extract_blocks(features, decoder.radius), decoder)


def decoder_backward(decoder: Decoder, features: FeatureMap, upstream) -> DecoderGradients:
    _check_channels(decoder, features)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.size != features.n:
        raise ShapeMismatchError(f"upstream gradient has length {upstream.size}, expected {features.n}")
    return decoder.backward_blocks(extract_blocks(features, decoder.radius).flat, upstream)


def count_estimate(p: ScoreMap) -> int:
    return int(np.count_nonzero(p.values > 0.5))


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> Tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatchError(
            f"parameter {params.shape}, gradient {grads.shape} and state {state.m.shape} shapes differ"
        )
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# --- checkpoints --------------------------------------------------------------

class CheckpointMeta(BaseModel):
    kind: DecoderKind
    radius: int
    channels: int
    hidden: Optional[int] = None
    version: int = CHECKPOINT_VERSION


def _stem(path: PathLike) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".meta.json", ".weights.p2rt", ".bias.p2rt"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def save_checkpoint(decoder: Decoder, directory: PathLike, stem: str) -> Path:
    """Write ``<stem>.weights.p2rt``, ``<stem>.bias.p2rt`` and ``<stem>.meta.json``; return the meta path."""
    base = Path(directory) / stem
    params = decoder.parameters()
    save_array(params[:-1], base.with_name(f"{stem}.weights.p2rt"))
    save_array(params[-1:], base.with_name(f"{stem}.bias.p2rt"))
    meta_path = base.with_name(f"{stem}.meta.json")
    atomic_write_text(meta_path, json.dumps(CheckpointMeta(**decoder.meta()).model_dump(mode="json"), indent=2) + "\n")
    logger.info("checkpoint written to %s", meta_path)
    return meta_path


def load_checkpoint(path: PathLike) -> Decoder:
    base = _stem(path)
    meta_path = base.with_name(f"{base.name}.meta.json")
    try:
        meta = CheckpointMeta(**json.loads(meta_path.read_text()))
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        logger.error(f"Failed to load checkpoint metadata: {e}")
        raise DataError(f"Error loading checkpoint {meta_path}: {str(e)}")
    weights = load_array(base.with_name(f"{base.name}.weights.p2rt")).reshape(-1)
    bias = load_array(base.with_name(f"{base.name}.bias.p2rt")).reshape(-1)
    if bias.size != 1:
        raise ShapeMismatchError(f"bias tensor must hold one value, got {bias.size}")
    if meta.kind == DecoderKind.LINEAR:
        return LinearDecoder(weights, bias[0], meta.radius, meta.channels)
    if meta.hidden is None:
        raise DataError(f"{meta_path}: MLP checkpoint without hidden width")
    return MlpDecoder.unflatten(np.concatenate([weights, bias]), meta.hidden, meta.radius, meta.channels)


def oracle_decoder(
    radius: int,
    channels: int,
    signature: Optional[np.ndarray] = None,
    gain: float = 10.0,
    amplitude: float = 1.0,
) -> LinearDecoder:
    """
    Matched filter on the centre cell of each block. The threshold sits
    halfway between the response at a planted point and at its nearest
    neighbour, so scores peak above 0.5 exactly at planted pixels.
    """
    signature = channel_signature(channels) if signature is None else np.asarray(signature, dtype=np.float64)
    if signature.shape != (channels,):
        raise ShapeMismatchError(f"signature must have {channels} entries, got {signature.shape}")
    weights = np.zeros((channels, radius, radius))
    weights[:, radius // 2, radius // 2] = gain * signature
    peak = amplitude * float(signature @ signature)
    threshold = 0.5 * peak * (1.0 + np.exp(-0.5))
    return LinearDecoder(weights.reshape(-1), -gain * threshold, radius, channels)

