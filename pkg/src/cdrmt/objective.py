"""Detection/referring objective: bipartite matching, focal, L1, GIoU and referring losses."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor2D

SCORE_EPS = 1e-7
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    ref: float = 2.0
    struct: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f"loss weight {f.name} must be >= 0")


# --- box geometry (numpy) -----------------------------------------------


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], 1)


def _pairwise(a: np.ndarray, b: np.ndarray):
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return a, b, inter, union


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between cxcywh boxes, ``len(a) x len(b)``."""
    _, _, inter, union = _pairwise(a, b)
    return inter / np.maximum(union, 1e-12)


def generalized_box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b, inter, union = _pairwise(a, b)
    iou = inter / np.maximum(union, 1e-12)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull = np.prod(np.clip(rb - lt, 0.0, None), axis=-1)
    return iou - (hull - union) / np.maximum(hull, 1e-12)


# --- matching -----------------------------------------------------------


@dataclass
class Assignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched: list[int] = field(default_factory=list)
    cost: float = 0.0

    def gt_for(self) -> dict[int, int]:
        return dict(self.pairs)


def matching_cost(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray, weights: LossWeights) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    giou = generalized_box_iou(boxes, gt_boxes)
    return weights.cls * (1.0 - scores)[:, None] + weights.l1 * l1 + weights.giou * (1.0 - giou)


def hungarian_match(boxes, scores, gt_boxes, weights: LossWeights | None = None) -> Assignment:
    """Minimum-cost one-to-one matching of predictions to ground-truth boxes."""
    weights = weights or LossWeights()
    n = np.asarray(boxes).reshape(-1, 4).shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0 or n == 0:
        return Assignment([], list(range(n)), 0.0)
    cost = matching_cost(boxes, scores, gt_boxes, weights)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    taken = {r for r, _ in pairs}
    return Assignment(pairs, [i for i in range(n) if i not in taken], float(cost[rows, cols].sum()))


# --- differentiable losses ----------------------------------------------


def focal_loss(scores: Tensor2D, targets, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor2D:
    """Mean over rows of the binary focal loss on probabilities (clamped to [eps, 1 - eps])."""
    t = np.asarray(targets, dtype=np.float64).reshape(scores.shape)
    p = T.clip(scores, SCORE_EPS, 1 - SCORE_EPS)
    pos = -alpha * T.power(1.0 - p, gamma) * T.log(p) if gamma else -alpha * T.log(p)
    neg = -(1 - alpha) * T.power(p, gamma) * T.log(1.0 - p) if gamma else -(1 - alpha) * T.log(1.0 - p)
    return T.mean_all(t * pos + (1.0 - t) * neg)


def referring_loss(scores: Tensor2D, labels) -> Tensor2D:
    """Mean binary cross-entropy on clamped scores, offset so a score sitting on the
    clamp of its label costs exactly zero."""
    y = np.asarray(labels, dtype=np.float64).reshape(scores.shape)
    p = T.clip(scores, SCORE_EPS, 1 - SCORE_EPS)
    top = 1.0 / (1 - SCORE_EPS)
    ll = y * T.log(p * top) + (1.0 - y) * T.log((1.0 - p) * top)
    return -T.mean_all(ll)


def _corners(b: Tensor2D):
    cx, cy, w, h = (T.take_cols(b, [i]) for i in range(4))
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def box_losses(pred: Tensor2D, gt) -> tuple[Tensor2D, Tensor2D]:
    """Summed L1 over the 4 coordinates and summed ``1 - GIoU`` over rows."""
    gt = T.as_tensor(gt)
    if pred.shape != gt.shape or pred.cols != 4:
        raise ValidationError(f"box losses need matching n x 4 boxes, got {pred.shape} and {gt.shape}")
    if (pred.data[:, 2:] <= 0).any() or (gt.data[:, 2:] <= 0).any():
        raise ValidationError("boxes must have positive width and height")
    l1 = T.sum_all(T.abs_(pred - gt))
    ax0, ay0, ax1, ay1 = _corners(pred)
    bx0, by0, bx1, by1 = _corners(gt)
    iw = T.relu(T.minimum(ax1, bx1) - T.maximum(ax0, bx0))
    ih = T.relu(T.minimum(ay1, by1) - T.maximum(ay0, by0))
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    hull = (T.maximum(ax1, bx1) - T.minimum(ax0, bx0)) * (T.maximum(ay1, by1) - T.minimum(ay0, by0))
    giou = inter / union - (hull - union) / hull
    return l1, T.sum_all(1.0 - giou)


# --- totals -------------------------------------------------------------


@dataclass
class FrameLosses:
    """Per-frame loss components for detection queries and carried track queries."""

    det_cls: Tensor2D | float = 0.0
    det_l1: Tensor2D | float = 0.0
    det_giou: Tensor2D | float = 0.0
    det_ref: Tensor2D | float = 0.0
    trk_cls: Tensor2D | float = 0.0
    trk_l1: Tensor2D | float = 0.0
    trk_giou: Tensor2D | float = 0.0
    trk_ref: Tensor2D | float = 0.0

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def total_loss(frame: FrameLosses, struct, weights: LossWeights, is_first_frame: bool):
    """Weighted sum of all components; the track terms are left out on the first frame."""
    groups = [("det", frame.det_cls, frame.det_l1, frame.det_giou, frame.det_ref)]
    if not is_first_frame:
        groups.append(("trk", frame.trk_cls, frame.trk_l1, frame.trk_giou, frame.trk_ref))
    total = 0.0
    for _, cls, l1, giou, ref in groups:
        total = total + weights.cls * cls + weights.l1 * l1 + weights.giou * giou + weights.ref * ref
    return total + weights.struct * struct
