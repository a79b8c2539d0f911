"""Progressive semantic-decoupled query learning.

Queries are conditioned on static-object semantics before the first half of
the decoder and on spatial-motion semantics before the second half. The
conditioning step (query semantic injection) is a rank-K additive update
built from gated copies of the queries and the stream features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bif import AttentionBlock, FeedForwardBlock, cross_attend, self_attend
from .errors import ConfigError, ShapeError
from .layers import LayerNorm, Linear, Module
from .tensor import Tensor2D


class AamParams(Module):
    """Gate ``sigmoid(psi1([psi2(X), max(X), avg(X)]))``; psi1 maps d+2 -> d, psi2 maps d -> d."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.psi2 = Linear(d, d, rng)
        self.psi1 = Linear(d + 2, d, rng)
        self.d = d


def aam_gate(x: Tensor2D, params: AamParams) -> Tensor2D:
    stats = T.concat_cols([params.psi2(x), T.row_max(x), T.row_mean(x)])
    return T.sigmoid(params.psi1(stats))


def aam_forward(x: Tensor2D, params: AamParams) -> Tensor2D:
    """``X + X * W(X)`` with an elementwise gate, so zero rows stay zero."""
    if x.cols != params.d:
        raise ShapeError(f"AAM expects width {params.d}, got {x.shape}")
    return x + x * aam_gate(x, params)


def qsi_forward(q: Tensor2D, f: Tensor2D, params: AamParams, softmax: bool = False) -> Tensor2D:
    """``Q + (AAM(Q) AAM(f)^T / sqrt(d)) AAM(f)``.

    The score matrix is used as is; ``softmax=True`` normalises its rows
    instead (comparison variant, not the default).
    """
    if q.cols != f.cols:
        raise ShapeError(f"query width {q.cols} differs from semantic feature width {f.cols}")
    aq = aam_forward(q, params)
    af = aam_forward(f, params)
    scores = aq @ af.T * (1.0 / math.sqrt(q.cols))
    if softmax:
        scores = T.row_softmax(scores)
    return q + scores @ af


class DecoderLayer(Module):
    def __init__(self, d: int, ffn_ratio: int, rng: np.random.Generator):
        self.self_attn = AttentionBlock(d, rng)
        self.cross_attn = AttentionBlock(d, rng)
        self.ffn = FeedForwardBlock(d, ffn_ratio, rng)


def decoder_layer_forward(q: Tensor2D, memory: Tensor2D, layer: DecoderLayer, memory_pos: Tensor2D | None,
                          query_pos: Tensor2D | None = None, attn_bias: Tensor2D | None = None) -> Tensor2D:
    q = self_attend(q, query_pos, layer.self_attn)
    q = cross_attend(q, memory, layer.cross_attn, key_pos=memory_pos, query_pos=query_pos, bias=attn_bias,
                     value_pos=memory_pos)
    return layer.ffn(q)


@dataclass
class QueryState:
    """Detection queries plus carried track queries for one frame."""

    detect: Tensor2D
    track: Tensor2D | None = None
    track_ids: list[int] = field(default_factory=list)
    misses: list[int] = field(default_factory=list)
    frame: int = 0

    def __post_init__(self):
        n_track = 0 if self.track is None else self.track.rows
        if len(self.track_ids) != n_track:
            raise ShapeError(f"{n_track} track queries but {len(self.track_ids)} identity tags")
        if len(set(self.track_ids)) != len(self.track_ids):
            raise ShapeError("track identity tags must be unique")
        if not self.misses:
            self.misses = [0] * n_track

    @property
    def num_detect(self) -> int:
        return self.detect.rows

    @property
    def num_track(self) -> int:
        return 0 if self.track is None else self.track.rows

    def stacked(self) -> Tensor2D:
        if self.track is None or self.track.rows == 0:
            return self.detect
        return T.concat_rows([self.detect, self.track])


class PsdqlParams(Module):
    def __init__(self, d: int, layers: int, ffn_ratio: int, rng: np.random.Generator):
        if layers < 2 or layers % 2:
            raise ConfigError(f"decoder layer count must be even and >= 2, got {layers}")
        self.aam_static = AamParams(d, rng)
        self.aam_motion = AamParams(d, rng)
        self.layers = [DecoderLayer(d, ffn_ratio, rng) for _ in range(layers)]
        # output norm keeps carried track embeddings on a fixed scale across frames
        self.out_norm = LayerNorm(d)
        self.d = d


@dataclass
class DecoderOptions:
    use_injection: bool = True
    inject_detect: bool = True
    inject_track: bool = True
    order: str = "static-first"  # or "motion-first"
    softmax: bool = False


def _inject(q: Tensor2D, f: Tensor2D, aam: AamParams, n_detect: int, opts: DecoderOptions) -> Tensor2D:
    if opts.inject_detect and opts.inject_track:
        return qsi_forward(q, f, aam, opts.softmax)
    if not opts.inject_detect and not opts.inject_track:
        return q
    det = T.take_rows(q, slice(0, n_detect))
    trk = T.take_rows(q, slice(n_detect, q.rows))
    if opts.inject_detect:
        det = qsi_forward(det, f, aam, opts.softmax)
    elif trk.rows:
        trk = qsi_forward(trk, f, aam, opts.softmax)
    return T.concat_rows([det, trk]) if trk.rows else det


def decoder_forward(
    queries: QueryState,
    memory: Tensor2D,
    f_static: Tensor2D,
    f_motion: Tensor2D,
    num_layers: int,
    params: PsdqlParams,
    memory_pos: Tensor2D | None = None,
    options: DecoderOptions | None = None,
    trace: list | None = None,
    query_pos: Tensor2D | None = None,
    attn_bias: Tensor2D | None = None,
) -> Tensor2D:
    """Two-phase decoder: inject, run layers 1..L/2, inject, run layers L/2+1..L.

    Returns the layer-normalised (N + M) x d decoded queries, detection rows first. When
    ``trace`` is a list, every intermediate query matrix is appended to it.
    """
    if num_layers < 2 or num_layers % 2:
        raise ConfigError(f"decoder layer count must be even and >= 2, got {num_layers}")
    if num_layers > len(params.layers):
        raise ConfigError(f"decoder has {len(params.layers)} layers, asked for {num_layers}")
    opts = options or DecoderOptions()
    first, second = (f_static, f_motion), (params.aam_static, params.aam_motion)
    if opts.order == "motion-first":
        phases = [(f_motion, params.aam_motion), (f_static, params.aam_static)]
    elif opts.order == "static-first":
        phases = list(zip(first, second))
    else:
        raise ConfigError(f"unknown injection order {opts.order!r}")

    q = queries.stacked()
    half = num_layers // 2
    for phase, (feat, aam) in enumerate(phases):
        if opts.use_injection:
            q = _inject(q, feat, aam, queries.num_detect, opts)
            if trace is not None:
                trace.append(q)
        for layer in params.layers[phase * half : (phase + 1) * half]:
            q = decoder_layer_forward(q, memory, layer, memory_pos, query_pos, attn_bias)
            if trace is not None:
                trace.append(q)
    return params.out_norm(q)


@dataclass(frozen=True)
class Predictions:
    boxes: Tensor2D  # N' x 4, cxcywh in (0, 1)
    scores: Tensor2D  # N' x 1 class confidence
    referring: Tensor2D  # N' x 1 referring confidence


class HeadParams(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.box = [Linear(d, d, rng), Linear(d, d, rng), Linear(d, 4, rng)]
        self.cls = Linear(d, 1, rng)
        self.ref = Linear(d, 1, rng)

    def zero_(self) -> "HeadParams":
        for lin in self.box + [self.cls, self.ref]:
            lin.zero_()
        return self


def predict_logits(q: Tensor2D, params: HeadParams) -> tuple[Tensor2D, Tensor2D, Tensor2D]:
    h = T.gelu(params.box[0](q))
    h = T.gelu(params.box[1](h))
    return params.box[2](h), params.cls(q), params.ref(q)


def predict_heads(q: Tensor2D, params: HeadParams) -> Predictions:
    box, cls, ref = predict_logits(q, params)
    return Predictions(T.sigmoid(box), T.sigmoid(cls), T.sigmoid(ref))
