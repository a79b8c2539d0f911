"""Deterministic stand-ins for the pretrained text and visual encoders, plus the
decoupled-stream fusion that conditions stream features on the fused sentence."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .harness.scenes import CATEGORIES, COLORS, SceneFrame
from .layers import LayerNorm, Linear, Module
from .tensor import Tensor2D

PAD_TOKEN = "<pad>"
NOISE_AMPLITUDE = 0.01
VELOCITY_SCALE = 10.0
VELOCITY_CHANNEL = len(CATEGORIES) + len(COLORS)
MIN_CHANNELS = VELOCITY_CHANNEL + 2


@dataclass(frozen=True)
class TextEmbedding:
    tokens: Tensor2D
    pooled: Tensor2D


@dataclass(frozen=True)
class VisualFeatures:
    grid: Tensor2D
    height: int
    width: int


def _bucket(feature: str, seed: int, hash_size: int) -> int:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=str(seed).encode()).digest()
    return int.from_bytes(digest, "little") % hash_size


@lru_cache(maxsize=16)
def _projection(hash_size: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, hash_size, dim])
    return rng.standard_normal((hash_size, dim))


@lru_cache(maxsize=4096)
def _token_vector(token: str, dim: int, seed: int, hash_size: int) -> np.ndarray:
    # hashed bag of the whole word and its boundary-marked character trigrams
    marked = f"<{token}>"
    features = [f"w:{token}"] + [marked[i : i + 3] for i in range(len(marked) - 2)]
    counts = np.zeros(hash_size)
    for feat in features:
        counts[_bucket(feat, seed, hash_size)] += 1.0
    counts[_bucket(f"w:{token}", seed, hash_size)] += 2.0
    vec = counts @ _projection(hash_size, dim, seed)
    vec = vec / np.sqrt(np.mean(vec * vec))
    vec.flags.writeable = False
    return vec


def embed_text(tokens: Sequence[str], dim: int, seed: int = 0, hash_size: int = 256) -> TextEmbedding:
    """Map each token to a fixed unit-RMS vector; an empty sequence becomes one PAD row."""
    if dim < 4:
        raise ValidationError(f"text embedding width must be >= 4, got {dim}")
    tokens = list(tokens) or [PAD_TOKEN]
    rows = np.stack([_token_vector(t, dim, seed, hash_size) for t in tokens])
    emb = Tensor2D(rows)
    return TextEmbedding(emb, Tensor2D(rows.mean(axis=0, keepdims=True)))


def object_encoding(category: str, color: str, speed: tuple[float, float], channels: int) -> np.ndarray:
    """Channel layout: category one-hot, colour one-hot, two scaled velocity channels, zeros."""
    enc = np.zeros(channels)
    enc[CATEGORIES.index(category)] = 1.0
    enc[len(CATEGORIES) + COLORS.index(color)] = 1.0
    enc[VELOCITY_CHANNEL] = speed[0] * VELOCITY_SCALE
    enc[VELOCITY_CHANNEL + 1] = speed[1] * VELOCITY_SCALE
    return enc


def background_noise(height: int, width: int, channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, height, width, channels])
    return rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(height * width, channels))


def cell_coverage(box: Sequence[float], height: int, width: int) -> np.ndarray:
    """Fraction of each row-major grid cell's area covered by a cxcywh box."""
    cx, cy, w, h = box
    x0, x1, y0, y1 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    xs = np.arange(width + 1) / width
    ys = np.arange(height + 1) / height
    fx = np.clip(np.minimum(xs[1:], x1) - np.maximum(xs[:-1], x0), 0.0, None) * width
    fy = np.clip(np.minimum(ys[1:], y1) - np.maximum(ys[:-1], y0), 0.0, None) * height
    return np.outer(fy, fx).reshape(-1)


def embed_scene(frame: SceneFrame, height: int, width: int, channels: int, seed: int = 0) -> VisualFeatures:
    """Rasterise a frame: each cell sums coverage-weighted object encodings over seeded noise."""
    if channels < MIN_CHANNELS:
        raise ValidationError(f"visual grid needs at least {MIN_CHANNELS} channels, got {channels}")
    grid = background_noise(height, width, channels, seed)
    for obj in frame.objects:
        cx, cy, w, h = obj.box
        if w <= 0 or h <= 0 or min(cx - w / 2, cy - h / 2) < -1e-9 or max(cx + w / 2, cy + h / 2) > 1 + 1e-9:
            raise ValidationError(f"object {obj.id}: box {obj.box} is not inside [0, 1]")
        cover = cell_coverage(obj.box, height, width)
        grid += np.outer(cover, object_encoding(obj.category, obj.color, obj.speed, channels))
    return VisualFeatures(Tensor2D(grid), height, width)


class DecoupledFusion(Module):
    """Stream features conditioned on the fused sentence.

    ``out = W2 · LN([proj(f) + mean(S_hat); proj(f)])`` where the pooled
    sentence row is broadcast over the K stream rows and ``W2`` maps the
    doubled width back to ``d``. With ``ln_last`` the order flips to
    ``LN(W2 · [...])``.
    """

    def __init__(self, text_dim: int, d: int, rng: np.random.Generator, ln_last: bool = False):
        self.proj = Linear(text_dim, d, rng)
        self.norm = LayerNorm(d if ln_last else 2 * d)
        self.out = Linear(2 * d, d, rng)
        self.ln_last = ln_last
        self.d = d

    def __call__(self, f: Tensor2D, s_hat: Tensor2D) -> Tensor2D:
        if s_hat.cols != self.d:
            raise ShapeError(f"fused sentence width {s_hat.cols} does not match model width {self.d}")
        p = self.proj(f)
        joined = T.concat_cols([p + T.col_mean(s_hat), p])
        if self.ln_last:
            return self.norm(self.out(joined))
        return self.out(self.norm(joined))


def fuse_decoupled_features(f: TextEmbedding | Tensor2D, s_hat: Tensor2D, params: DecoupledFusion) -> Tensor2D:
    tokens = f.tokens if isinstance(f, TextEmbedding) else f
    return params(tokens, s_hat)
