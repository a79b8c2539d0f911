"""The full per-frame network: encoders -> fusion -> context -> two-phase decoder -> heads,
with the training-only reconstruction branch."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .bif import BifParams, ContextParams, bif_forward, context_encode
from .config import ModelConfig
from .decoupler import Lexicon, decouple
from .encoders import DecoupledFusion, embed_scene, embed_text
from .harness.scenes import SceneFrame
from .layers import LayerNorm, Linear, Module, sinusoid_points
from .psdql import DecoderOptions, HeadParams, Predictions, PsdqlParams, QueryState, decoder_forward, predict_logits
from .scc import EmbeddingSet, SccParams, proxy_features, reconstruct_all
from .tensor import Parameter, Tensor2D


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def anchor_grid(n: int, size: float = 0.2) -> np.ndarray:
    """``n`` cxcywh boxes whose centres fill a near-square grid row by row."""
    rows = max(1, int(math.floor(math.sqrt(n))))
    cols = math.ceil(n / rows)
    out = []
    for i in range(n):
        r, c = divmod(i, cols)
        per_row = min(cols, n - r * cols)
        out.append(((c + 0.5) / per_row, (r + 0.5) / rows, size, size))
    return np.array(out)


def spatial_prior(boxes: np.ndarray, h: int, w: int, spread: float = 0.5) -> np.ndarray:
    """Gaussian log-weights over grid cells centred on each reference box, with a
    standard deviation of ``spread`` times the box size (at least one cell)."""
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    cy, cx = np.repeat(ys, w), np.tile(xs, h)
    sx = np.maximum(spread * boxes[:, 2:3], 1.0 / w)
    sy = np.maximum(spread * boxes[:, 3:4], 1.0 / h)
    return -0.5 * (((cx[None] - boxes[:, 0:1]) / sx) ** 2 + ((cy[None] - boxes[:, 1:2]) / sy) ** 2)


@dataclass(frozen=True)
class TextInputs:
    expression: str
    sentence: Tensor2D  # L x D token embeddings of the whole expression
    static: Tensor2D  # K_o x D
    motion: Tensor2D  # K_m x D
    originals: EmbeddingSet  # pooled (static, motion, global) in the text space


@lru_cache(maxsize=256)
def _prepare_text(expression: str, text_dim: int, hash_size: int, lexicon: Lexicon | None) -> TextInputs:
    parsed = decouple(expression, lexicon)
    sentence = embed_text(parsed.original, text_dim, hash_size=hash_size)
    static = embed_text(parsed.static_stream, text_dim, hash_size=hash_size)
    motion = embed_text(parsed.motion_stream, text_dim, hash_size=hash_size)
    originals = EmbeddingSet.of(static.pooled, motion.pooled, sentence.pooled)
    return TextInputs(expression, sentence.tokens, static.tokens, motion.tokens, originals)


@dataclass
class FrameOutput:
    predictions: Predictions
    box_logits: Tensor2D
    cls_logits: Tensor2D
    ref_logits: Tensor2D
    decoded: Tensor2D  # (N + M) x d, detection rows first
    reconstructed: EmbeddingSet | None = None


class CdrmtModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, lambda_angle: float = 0.4):
        rng = np.random.default_rng(seed)
        d = cfg.d
        self.cfg = cfg
        self.visual_proj = Linear(cfg.channels, d, rng)
        self.text_proj = Linear(cfg.text_dim, d, rng)
        # input norms put both token streams on the unit scale of the residual branches
        self.visual_norm = LayerNorm(d)
        self.text_norm = LayerNorm(d)
        self.bif = BifParams(d, cfg.grid_h, cfg.grid_w, cfg.max_text, cfg.bif_layers, cfg.ffn_ratio, rng)
        self.context = ContextParams(d, cfg.grid_h, cfg.grid_w, cfg.context_layers, cfg.ffn_ratio, rng)
        self.fusion = DecoupledFusion(cfg.text_dim, d, rng, ln_last=cfg.fuse_ln_last)
        self.queries = Parameter("queries", T.init_uniform(rng, (cfg.num_queries, d), d))
        # box head predicts a logit-space offset from a learnable reference box per query
        self.ref_boxes = Parameter("ref_boxes", _logit(anchor_grid(cfg.num_queries)))
        self.psdql = PsdqlParams(d, cfg.decoder_layers, cfg.ffn_ratio, rng)
        self.heads = HeadParams(d, rng)
        self.heads.box[-1].zero_()
        self.scc = SccParams(d, cfg.ffn_ratio, rng, lambda_angle)
        self.rename_parameters()

    @property
    def embedder_parameters(self) -> list[Parameter]:
        return (self.visual_proj.parameters() + self.visual_norm.parameters()
                + self.text_proj.parameters() + self.text_norm.parameters())

    def decoder_options(self) -> DecoderOptions:
        c = self.cfg
        return DecoderOptions(c.use_psdql, c.inject_detect, c.inject_track, c.injection_order, c.qsi_softmax)

    def text_inputs(self, expression: str, lexicon: Lexicon | None = None) -> TextInputs:
        return _prepare_text(expression, self.cfg.text_dim, self.cfg.hash_size, lexicon)

    def visual_inputs(self, frame: SceneFrame, seed: int) -> Tensor2D:
        c = self.cfg
        return embed_scene(frame, c.grid_h, c.grid_w, c.channels, seed).grid

    def forward(
        self,
        visual: Tensor2D,
        text: TextInputs,
        track: Tensor2D | None = None,
        track_ids: list[int] | None = None,
        with_reconstruction: bool = False,
    ) -> FrameOutput:
        """One frame through the network.

        ``track`` rows hold a carried query embedding followed by the 4 box logits the
        query produced on the previous frame, which serve as its reference box.
        """
        c = self.cfg
        track_ref = None
        if track is not None:
            track_ref = Tensor2D(track.data[:, c.d :])
            track = Tensor2D(track.data[:, : c.d])
        v = self.visual_norm(self.visual_proj(visual))
        s = self.text_norm(self.text_proj(text.sentence))
        fused = bif_forward(v, s, self.bif)
        memory = context_encode(fused.visual, c.context_layers, self.context)
        f_static = self.fusion(text.static, fused.text)
        f_motion = self.fusion(text.motion, fused.text)

        state = QueryState(self.queries, track, list(track_ids or []))
        ref_all = self.ref_boxes.data if track_ref is None else np.concatenate([self.ref_boxes.data, track_ref.data])
        ref_prob = 1.0 / (1.0 + np.exp(-ref_all))
        decoded = decoder_forward(
            state, memory, f_static, f_motion, c.decoder_layers, self.psdql,
            memory_pos=self.bif.pos_visual, options=self.decoder_options(),
            query_pos=Tensor2D(sinusoid_points(ref_prob[:, [1, 0]], c.d)),
            attn_bias=Tensor2D(spatial_prior(ref_prob, c.grid_h, c.grid_w)),
        )
        box_logits, cls_logits, ref_logits = predict_logits(decoded, self.heads)
        ref = self.ref_boxes if track_ref is None else T.concat_rows([self.ref_boxes, track_ref])
        box_logits = box_logits + ref
        preds = Predictions(T.sigmoid(box_logits), T.sigmoid(cls_logits), T.sigmoid(ref_logits))

        reconstructed = None
        if with_reconstruction:
            s_static = self.fusion.proj(text.static)
            s_motion = self.fusion.proj(text.motion)
            proxy_so, proxy_sm = proxy_features(fused.visual_self, s_static, s_motion, self.scc)
            reconstructed = reconstruct_all(memory, proxy_so, proxy_sm, self.scc)
        return FrameOutput(preds, box_logits, cls_logits, ref_logits, decoded, reconstructed)

    @staticmethod
    def carry_state(out: FrameOutput) -> np.ndarray:
        """Rows to feed back as track queries: decoded embedding and box logits."""
        return np.concatenate([out.decoded.data, out.box_logits.data], axis=1)

    def infer(self, frame: SceneFrame, expression: str, track, track_ids, noise_seed: int):
        """Untaped forward pass returning numpy head outputs for the tracking loop."""
        from .harness.tracking import StepOutput

        text = self.text_inputs(expression)
        track_t = None if track is None or len(track) == 0 else Tensor2D(np.asarray(track))
        out = self.forward(self.visual_inputs(frame, noise_seed), text, track_t, list(track_ids))
        p = out.predictions
        return StepOutput(p.boxes.data.copy(), p.scores.data[:, 0].copy(), p.referring.data[:, 0].copy(),
                          self.carry_state(out), self.cfg.num_queries)
