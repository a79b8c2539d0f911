"""Structural consistency between original and reconstructed text embeddings.

Visual proxy features are decoded back into the text space by a single
query-driven block. The structural loss then asks the reconstructed set to
reproduce the *relative* geometry of the original set: normalised pairwise
distances and per-vertex angles. Both terms are invariant to uniform scaling,
rotation/reflection and translation of either space; the point-wise loss,
kept for comparison, is not.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .bif import AttentionBlock, FeedForwardBlock, cross_attend
from .errors import InsufficientSetError, ShapeError, ValidationError
from .layers import Module
from .tensor import Parameter, Tensor2D

LABELS = ("so", "sm", "g")
DIST_FLOOR = 1e-8
EDGE_FLOOR = 1e-8
DEFAULT_LAMBDA_ANGLE = 0.4


@dataclass(frozen=True)
class EmbeddingSet:
    """One expression's (static, motion, global) embeddings in one space."""

    members: tuple[tuple[str, Tensor2D], ...]
    space: str = "original"

    def __post_init__(self):
        labels = [label for label, _ in self.members]
        if sorted(labels) != sorted(set(labels)):
            raise ValidationError(f"embedding set has duplicate labels {labels}")
        if self.space not in ("original", "reconstructed"):
            raise ValidationError(f"unknown embedding space {self.space!r}")
        widths = {v.shape for _, v in self.members}
        if len(widths) > 1 or any(s[0] != 1 for s in widths):
            raise ShapeError(f"embedding set members must share one 1 x d shape, got {widths}")

    @classmethod
    def of(cls, so: Tensor2D, sm: Tensor2D, g: Tensor2D, space: str = "original") -> "EmbeddingSet":
        return cls((("so", so), ("sm", sm), ("g", g)), space)

    def vectors(self) -> list[Tensor2D]:
        order = {label: i for i, label in enumerate(LABELS)}
        return [v for _, v in sorted(self.members, key=lambda m: order.get(m[0], len(order)))]


def _flatten(sets: EmbeddingSet | Sequence[EmbeddingSet]) -> list[Tensor2D]:
    if isinstance(sets, EmbeddingSet):
        sets = [sets]
    out = []
    for s in sets:
        out.extend(s.vectors())
    return out


def _groups(sets, cross: bool) -> list[list[int]]:
    if isinstance(sets, EmbeddingSet):
        sets = [sets]
    sizes = [len(s.members) for s in sets]
    if cross:
        return [list(range(sum(sizes)))]
    edges = np.cumsum([0] + sizes)
    return [list(range(edges[i], edges[i + 1])) for i in range(len(sizes))]


def pair_set(groups: list[list[int]]) -> list[tuple[int, int]]:
    return [pair for g in groups for pair in itertools.combinations(g, 2)]


def triplet_set(groups: list[list[int]]) -> list[tuple[int, int, int]]:
    """One angle per vertex: (vertex, j, k) with j < k drawn from the rest of the group."""
    out = []
    for g in groups:
        for i in g:
            rest = [j for j in g if j != i]
            out.extend((i, j, k) for j, k in itertools.combinations(rest, 2))
    return out


def _norm(v: Tensor2D) -> Tensor2D:
    return T.sqrt(T.row_sum(T.square(v)))


def _check_aligned(a: list[Tensor2D], b: list[Tensor2D], minimum: int) -> None:
    if len(a) != len(b):
        raise ValidationError(f"original and reconstructed sets differ in size ({len(a)} vs {len(b)})")
    if len(a) < minimum:
        raise InsufficientSetError(f"need at least {minimum} embeddings, got {len(a)}")


def _distances(vecs: list[Tensor2D], pairs) -> tuple[list[Tensor2D | None], Tensor2D]:
    dists = []
    for i, j in pairs:
        diff = vecs[i] - vecs[j]
        # exact coincidence has no gradient direction; treat as a constant zero
        dists.append(_norm(diff) if np.any(diff.data) else Tensor2D(0.0))
    mean = T.maximum(T.sum_all(T.concat_rows(dists)) * (1.0 / len(dists)), DIST_FLOOR)
    return dists, mean


def loss_dist(E, E_rec, cross_expression: bool = True) -> Tensor2D:
    """Huber loss between mean-normalised pairwise distances of the two spaces."""
    a, b = _flatten(E), _flatten(E_rec)
    _check_aligned(a, b, 2)
    pairs = pair_set(_groups(E, cross_expression))
    if not pairs:
        raise InsufficientSetError("no embedding pairs to compare")
    da, mean_a = _distances(a, pairs)
    db, mean_b = _distances(b, pairs)
    terms = [T.huber(x / mean_a - y / mean_b) for x, y in zip(da, db)]
    return T.sum_all(T.concat_rows(terms))


def _cosine(vecs: list[Tensor2D], i: int, j: int, k: int) -> Tensor2D | None:
    u = vecs[j] - vecs[i]
    w = vecs[k] - vecs[i]
    if np.linalg.norm(u.data) < EDGE_FLOOR or np.linalg.norm(w.data) < EDGE_FLOOR:
        return None
    return T.row_sum(u * w) / (_norm(u) * _norm(w))


def vertex_cosine(vi, vj, vk) -> float:
    """cos of the angle at ``vi`` between the edges to ``vj`` and ``vk``."""
    c = _cosine([T.as_tensor(vi), T.as_tensor(vj), T.as_tensor(vk)], 0, 1, 2)
    if c is None:
        raise ValidationError("degenerate angle: an edge has zero length")
    return c.item()


def loss_angle(E, E_rec, cross_expression: bool = True) -> Tensor2D:
    """Huber loss between per-vertex angle cosines; triplets with a degenerate edge in
    either space are skipped."""
    a, b = _flatten(E), _flatten(E_rec)
    _check_aligned(a, b, 3)
    terms = []
    for i, j, k in triplet_set(_groups(E, cross_expression)):
        ca, cb = _cosine(a, i, j, k), _cosine(b, i, j, k)
        if ca is None or cb is None:
            continue
        terms.append(T.huber(ca - cb))
    if not terms:
        return Tensor2D(0.0)
    return T.sum_all(T.concat_rows(terms))


def loss_struct(E, E_rec, lambda_angle: float = DEFAULT_LAMBDA_ANGLE, cross_expression: bool = True) -> Tensor2D:
    if lambda_angle < 0:
        raise ValidationError(f"lambda_angle must be >= 0, got {lambda_angle}")
    dist = loss_dist(E, E_rec, cross_expression)
    if lambda_angle == 0:
        return dist
    return dist + lambda_angle * loss_angle(E, E_rec, cross_expression)


def loss_pointwise(E, E_rec) -> Tensor2D:
    """Sum of Huber(||e_i - e'_i||); needs both spaces to share a width."""
    a, b = _flatten(E), _flatten(E_rec)
    _check_aligned(a, b, 1)
    terms = []
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise ShapeError(f"point-wise loss needs equal widths, got {x.shape} and {y.shape}")
        diff = x - y
        terms.append(T.huber(_norm(diff)) if np.any(diff.data) else Tensor2D(0.0))
    return T.sum_all(T.concat_rows(terms))


class SccParams(Module):
    def __init__(self, d: int, ffn_ratio: int, rng: np.random.Generator, lambda_angle: float = DEFAULT_LAMBDA_ANGLE):
        if lambda_angle < 0:
            raise ValidationError(f"lambda_angle must be >= 0, got {lambda_angle}")
        self.proxy = AttentionBlock(d, rng)
        self.decoder_attn = AttentionBlock(d, rng)
        self.decoder_ffn = FeedForwardBlock(d, ffn_ratio, rng)
        self.text_queries = Parameter("text_queries", T.init_uniform(rng, (3, d), d))
        self.lambda_angle = lambda_angle


def proxy_features(v_tilde: Tensor2D, s_static: Tensor2D, s_motion: Tensor2D, params: SccParams):
    """Visual tokens attending to each text stream: ``V + LN(CA(V, S, S))`` for both streams."""
    return cross_attend(v_tilde, s_static, params.proxy), cross_attend(v_tilde, s_motion, params.proxy)


def reconstruct_text(features: Tensor2D, query: Tensor2D, params: SccParams) -> Tensor2D:
    """One decoder block driven by a single query row; returns the 1 x d reconstruction."""
    if query.rows != 1:
        raise ShapeError(f"text reconstruction takes one query row, got {query.shape}")
    return params.decoder_ffn(cross_attend(query, features, params.decoder_attn))


def reconstruct_all(context: Tensor2D, f_static: Tensor2D, f_motion: Tensor2D, params: SccParams) -> EmbeddingSet:
    rows = [T.take_rows(params.text_queries, [i]) for i in range(3)]
    e_so = reconstruct_text(f_static, rows[0], params)
    e_sm = reconstruct_text(f_motion, rows[1], params)
    e_g = reconstruct_text(context, rows[2], params)
    return EmbeddingSet.of(e_so, e_sm, e_g, space="reconstructed")
