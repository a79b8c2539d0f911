"""Bidirectional interactive fusion of visual and text tokens, and the visual context encoder.

Every sub-block has the residual form ``x + LN(block(x))``: with the block's
value path zeroed and LN at its default affine the block is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import Attention, FeedForward, LayerNorm, Module, sinusoid_1d, sinusoid_2d
from .tensor import Tensor2D


class AttentionBlock(Module):
    """``x + LN(attn(...))`` with its own attention weights and LN affine."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.attn = Attention(d, d, d, rng)
        self.norm = LayerNorm(d)

    def zero_values_(self) -> "AttentionBlock":
        self.attn.w_v.assign(np.zeros(self.attn.w_v.shape))
        return self


class FeedForwardBlock(Module):
    def __init__(self, d: int, ratio: int, rng: np.random.Generator):
        self.ffn = FeedForward(d, ratio * d, rng)
        self.norm = LayerNorm(d)

    def __call__(self, x: Tensor2D) -> Tensor2D:
        return x + self.norm(self.ffn(x))


def self_attend(x: Tensor2D, pos: Tensor2D | None, block: AttentionBlock) -> Tensor2D:
    """``x + LN(SA(x + pos))``; ``pos`` is truncated to the rows of ``x``."""
    if pos is not None:
        if pos.rows < x.rows:
            raise ShapeError(f"positional encoding has {pos.rows} rows for {x.rows} tokens")
        if pos.cols != x.cols:
            raise ShapeError(f"positional encoding width {pos.cols} differs from input width {x.cols}")
        if pos.rows > x.rows:
            pos = T.take_rows(pos, slice(0, x.rows))
        h = x + pos
    else:
        h = x
    return x + block.norm(block.attn(h, h, h))


def cross_attend(q: Tensor2D, kv: Tensor2D, block: AttentionBlock, key_pos: Tensor2D | None = None,
                 query_pos: Tensor2D | None = None, bias: Tensor2D | None = None,
                 value_pos: Tensor2D | None = None) -> Tensor2D:
    """``q + LN(CA(q, kv, kv))``; ``key_pos``/``query_pos`` are added to the attention
    keys/queries only, never to the values or the residual. ``bias`` is added to the
    attention logits. ``value_pos`` is added to the values, which lets the output
    report where the attended tokens sit."""
    if q.cols != kv.cols:
        raise ShapeError(f"cross attention query width {q.cols} differs from key/value width {kv.cols}")
    keys = kv if key_pos is None else kv + key_pos
    queries = q if query_pos is None else q + query_pos
    values = kv if value_pos is None else kv + value_pos
    return q + block.norm(block.attn(queries, keys, values, bias))


class BifLayer(Module):
    def __init__(self, d: int, ffn_ratio: int, rng: np.random.Generator):
        self.sa_visual = AttentionBlock(d, rng)
        self.sa_text = AttentionBlock(d, rng)
        self.ca_visual = AttentionBlock(d, rng)  # visual queries attend to text
        self.ca_text = AttentionBlock(d, rng)  # text queries attend to visual
        self.ffn_visual = FeedForwardBlock(d, ffn_ratio, rng)
        self.ffn_text = FeedForwardBlock(d, ffn_ratio, rng)

    def zero_interaction_(self) -> "BifLayer":
        self.ca_visual.zero_values_()
        self.ca_text.zero_values_()
        return self


class BifParams(Module):
    """Stacked fusion layers plus the fixed positional encodings."""

    def __init__(self, d: int, grid_h: int, grid_w: int, max_text: int, layers: int, ffn_ratio: int,
                 rng: np.random.Generator):
        self.pos_visual = Tensor2D(sinusoid_2d(grid_h, grid_w, d))
        self.pos_text = Tensor2D(sinusoid_1d(max_text, d))
        self.layers = [BifLayer(d, ffn_ratio, rng) for _ in range(layers)]
        self.d = d


@dataclass(frozen=True)
class FusedFeatures:
    visual: Tensor2D
    text: Tensor2D
    visual_self: Tensor2D  # first layer's self-attended visual tokens
    context: Tensor2D | None = None


def bif_layer_forward(v: Tensor2D, s: Tensor2D, layer: BifLayer, pos_v: Tensor2D, pos_l: Tensor2D):
    v_sa = self_attend(v, pos_v, layer.sa_visual)
    s_sa = self_attend(s, pos_l, layer.sa_text)
    v_x = cross_attend(v_sa, s_sa, layer.ca_visual)
    s_x = cross_attend(s_sa, v_sa, layer.ca_text)
    return layer.ffn_visual(v_x), layer.ffn_text(s_x), v_sa


def bif_forward(v: Tensor2D, s: Tensor2D, params: BifParams) -> FusedFeatures:
    """Self-attention per modality, cross-attention in both directions, FFN per modality;
    repeated over ``params.layers``. Inputs must already have width ``d``."""
    if v.cols != params.d or s.cols != params.d:
        raise ShapeError(f"fusion expects width {params.d}, got visual {v.shape} and text {s.shape}")
    first_sa = None
    for layer in params.layers:
        v, s, v_sa = bif_layer_forward(v, s, layer, params.pos_visual, params.pos_text)
        first_sa = v_sa if first_sa is None else first_sa
    return FusedFeatures(v, s, first_sa)


class ContextLayer(Module):
    def __init__(self, d: int, ffn_ratio: int, rng: np.random.Generator):
        self.sa = AttentionBlock(d, rng)
        self.ffn = FeedForwardBlock(d, ffn_ratio, rng)

    def zero_(self) -> "ContextLayer":
        self.sa.zero_values_()
        self.ffn.ffn.zero_()
        return self


class ContextParams(Module):
    def __init__(self, d: int, grid_h: int, grid_w: int, layers: int, ffn_ratio: int, rng: np.random.Generator):
        self.pos_visual = Tensor2D(sinusoid_2d(grid_h, grid_w, d))
        self.layers = [ContextLayer(d, ffn_ratio, rng) for _ in range(layers)]


def context_encode(v_hat: Tensor2D, layers: int, params: ContextParams) -> Tensor2D:
    """Plain self-attention encoder over the fused visual tokens (stand-in for a
    deformable encoder); uses the first ``layers`` layers of ``params``."""
    if layers < 1 or layers > len(params.layers):
        raise ShapeError(f"context encoder has {len(params.layers)} layers, asked for {layers}")
    x = v_hat
    for layer in params.layers[:layers]:
        x = layer.ffn(self_attend(x, params.pos_visual, layer.sa))
    return x
