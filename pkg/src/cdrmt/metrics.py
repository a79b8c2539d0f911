"""HOTA-family tracking metrics and per-frame referring F1."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .objective import box_iou

log = logging.getLogger(__name__)

ALPHAS = tuple(round(0.05 * k, 2) for k in range(1, 20))
FIELDS = ("HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA")

Boxes = Mapping[int, Sequence[float]]  # identity -> cxcywh box


@dataclass
class FrameMatch:
    tp: list[tuple[int, int, float]]  # (gt index, pred index, IoU)
    fn: list[int]
    fp: list[int]


def match_frame(pred_boxes, pred_ids, gt_boxes, gt_ids, alpha: float) -> FrameMatch:
    """Maximum IoU-sum one-to-one matching using only pairs with IoU >= ``alpha``.

    ``pred_ids``/``gt_ids`` are accepted for symmetry with the track representation;
    matching itself is purely geometric.
    """
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gb = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(pred_ids) != len(pb) or len(gt_ids) != len(gb):
        raise ValidationError("ids and boxes differ in length")
    if len(pb) == 0 or len(gb) == 0:
        return FrameMatch([], list(range(len(gb))), list(range(len(pb))))
    iou = box_iou(gb, pb)
    gain = np.where(iou >= alpha, iou, 0.0)
    rows, cols = linear_sum_assignment(gain, maximize=True)
    tp = [(int(g), int(p), float(iou[g, p])) for g, p in zip(rows, cols) if iou[g, p] >= alpha]
    hit_g = {g for g, _, _ in tp}
    hit_p = {p for _, p, _ in tp}
    return FrameMatch(
        sorted(tp),
        [g for g in range(len(gb)) if g not in hit_g],
        [p for p in range(len(pb)) if p not in hit_p],
    )


@dataclass
class EvalSequence:
    """Ground truth and predictions of one (scene, expression) pair: frame -> {id: box}."""

    gt: dict[int, Boxes]
    pred: dict[int, Boxes]
    name: str = ""

    def frames(self) -> list[int]:
        return sorted(set(self.gt) | set(self.pred))


@dataclass
class AlphaCounts:
    """Additive per-threshold statistics; summing two of these pools their sequences."""

    tp: int = 0
    fn: int = 0
    fp: int = 0
    ass: float = 0.0
    ass_re: float = 0.0
    ass_pr: float = 0.0
    iou: float = 0.0

    def __add__(self, other: "AlphaCounts") -> "AlphaCounts":
        return AlphaCounts(*(getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__))


def sequence_counts(seq: EvalSequence, alphas: Sequence[float] = ALPHAS) -> list[AlphaCounts]:
    gt_frames = Counter(i for t in seq.gt for i in seq.gt[t])
    pr_frames = Counter(i for t in seq.pred for i in seq.pred[t])
    result = []
    for alpha in alphas:
        c = AlphaCounts()
        pairs: Counter = Counter()
        matched = []
        for t in seq.frames():
            g, p = seq.gt.get(t, {}), seq.pred.get(t, {})
            gi, pi = list(g), list(p)
            m = match_frame([p[i] for i in pi], pi, [g[i] for i in gi], gi, alpha)
            c.fn += len(m.fn)
            c.fp += len(m.fp)
            for a, b, v in m.tp:
                matched.append((gi[a], pi[b]))
                pairs[(gi[a], pi[b])] += 1
                c.iou += v
        c.tp = len(matched)
        for g_id, p_id in matched:
            k = pairs[(g_id, p_id)]
            c.ass += k / (gt_frames[g_id] + pr_frames[p_id] - k)
            c.ass_re += k / gt_frames[g_id]
            c.ass_pr += k / pr_frames[p_id]
        result.append(c)
    return result


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def alpha_scores(c: AlphaCounts) -> dict[str, float]:
    if c.tp + c.fn + c.fp == 0:
        return dict.fromkeys(FIELDS, 1.0)
    det_a = c.tp / (c.tp + c.fn + c.fp)
    ass_a = _ratio(c.ass, c.tp)
    return {
        "HOTA": math.sqrt(det_a * ass_a),
        "DetA": det_a,
        "AssA": ass_a,
        "DetRe": _ratio(c.tp, c.tp + c.fn),
        "DetPr": _ratio(c.tp, c.tp + c.fp),
        "AssRe": _ratio(c.ass_re, c.tp),
        "AssPr": _ratio(c.ass_pr, c.tp),
        "LocA": _ratio(c.iou, c.tp),
    }


@dataclass
class EvalReport:
    HOTA: float
    DetA: float
    AssA: float
    DetRe: float
    DetPr: float
    AssRe: float
    AssPr: float
    LocA: float
    per_alpha: list[dict] = field(default_factory=list)
    vacuous: bool = False

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in FIELDS}


def report_from_counts(counts: Sequence[AlphaCounts], alphas: Sequence[float] = ALPHAS) -> EvalReport:
    per_alpha = [{"alpha": a, **alpha_scores(c)} for a, c in zip(alphas, counts)]
    vacuous = all(c.tp + c.fn + c.fp == 0 for c in counts)
    if vacuous:
        log.warning("no ground truth and no predictions: scores are vacuously 1.0")
    means = {k: float(np.mean([row[k] for row in per_alpha])) for k in FIELDS}
    return EvalReport(**means, per_alpha=per_alpha, vacuous=vacuous)


def merge_counts(parts: Iterable[Sequence[AlphaCounts]], n_alphas: int) -> list[AlphaCounts]:
    total = [AlphaCounts() for _ in range(n_alphas)]
    for part in parts:
        total = [a + b for a, b in zip(total, part)]
    return total


def evaluate(sequences: EvalSequence | Sequence[EvalSequence], alphas: Sequence[float] = ALPHAS) -> EvalReport:
    """HOTA over one sequence or a pool of them (association is scored within each sequence)."""
    if isinstance(sequences, EvalSequence):
        sequences = [sequences]
    return report_from_counts(merge_counts((sequence_counts(s, alphas) for s in sequences), len(alphas)), alphas)


@dataclass
class F1Counts:
    tp: int = 0
    fn: int = 0
    fp: int = 0

    def __add__(self, other: "F1Counts") -> "F1Counts":
        return F1Counts(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp)

    @property
    def f1(self) -> float:
        den = 2 * self.tp + self.fn + self.fp
        return 1.0 if den == 0 else 2 * self.tp / den

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn) if self.tp + self.fn else 1.0


def referring_counts(seq: EvalSequence, iou: float = 0.5) -> F1Counts:
    """Frame-level hits: a prediction is correct when it overlaps a referred object at ``iou``."""
    c = F1Counts()
    for t in seq.frames():
        g, p = seq.gt.get(t, {}), seq.pred.get(t, {})
        m = match_frame(list(p.values()), list(p), list(g.values()), list(g), iou)
        c = c + F1Counts(len(m.tp), len(m.fn), len(m.fp))
    return c


def referring_f1(sequences: EvalSequence | Sequence[EvalSequence], iou: float = 0.5) -> float:
    if isinstance(sequences, EvalSequence):
        sequences = [sequences]
    total = F1Counts()
    for s in sequences:
        total = total + referring_counts(s, iou)
    return total.f1


# --- report output ------------------------------------------------------

COLUMNS = ("name",) + FIELDS + ("RefF1",)


def report_rows(named: Sequence[tuple[str, EvalReport, float]]) -> list[dict]:
    return [{"name": name, **rep.as_row(), "RefF1": f1} for name, rep, f1 in named]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(COLUMNS), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def format_table(rows: Sequence[dict], columns: Sequence[str] = COLUMNS) -> str:
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
