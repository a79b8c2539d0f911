"""Inference loop: two-stage filtering, track-query carry-over and track termination."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ..errors import ValidationError
from ..objective import box_iou
from .oracle import referring_oracle
from .scenes import SceneFrame


@dataclass
class StepOutput:
    """Per-frame head outputs for ``num_detect`` detection rows followed by the track rows."""

    boxes: np.ndarray  # (N + M) x 4
    scores: np.ndarray  # N + M
    referring: np.ndarray  # N + M
    embeddings: np.ndarray  # (N + M) x d, carried as next-frame track queries
    num_detect: int


class FrameModel(Protocol):
    def infer(self, frame: SceneFrame, expression: str, track: np.ndarray | None,
              track_ids: list[int], noise_seed: int) -> StepOutput: ...


@dataclass
class Track:
    id: int
    frames: list[int] = field(default_factory=list)
    boxes: list[list[float]] = field(default_factory=list)
    referred: list[bool] = field(default_factory=list)
    scores: list[tuple[float, float]] = field(default_factory=list)
    misses: int = 0

    def observe(self, t: int, box, score: float, ref: float, accepted: bool) -> None:
        if self.frames and t <= self.frames[-1]:
            raise ValidationError(f"track {self.id}: frame {t} does not follow {self.frames[-1]}")
        self.frames.append(t)
        self.boxes.append([float(x) for x in box])
        self.referred.append(bool(accepted))
        self.scores.append((float(score), float(ref)))

    def visible(self) -> dict[int, list[float]]:
        return {t: b for t, b, r in zip(self.frames, self.boxes, self.referred) if r}


@dataclass
class TrackingThresholds:
    confidence: float = 0.7
    beta_ref: float = 0.5
    max_misses: int = 3
    dedup_iou: float = 0.5

    def validate(self) -> "TrackingThresholds":
        if not (0 <= self.confidence <= 1 and 0 <= self.beta_ref <= 1 and 0 < self.dedup_iou <= 1):
            raise ValidationError("thresholds must lie in [0, 1]")
        if self.max_misses < 1:
            raise ValidationError("max_misses must be >= 1")
        return self


def run_tracking(model: FrameModel, frames: Sequence[SceneFrame], expression: str,
                 thresholds=None, noise_seed: int = 0) -> list[Track]:
    """Track the objects referred to by ``expression`` through ``frames``.

    A query survives stage 1 when its class score exceeds ``confidence`` and stage 2
    when its referring score exceeds ``beta_ref``. Surviving detections open new tracks
    unless they overlap (IoU >= ``dedup_iou``) an object already held by a live track.
    Every live track re-enters the decoder as a track query; after ``max_misses``
    consecutive rejected frames it is dropped.
    """
    th = thresholds or TrackingThresholds()
    if not isinstance(th, TrackingThresholds):
        th = TrackingThresholds(th.confidence, th.beta_ref, th.max_misses, th.dedup_iou)
    th.validate()
    if not frames:
        raise ValidationError("tracking needs at least one frame")

    tracks: list[Track] = []
    live: list[Track] = []
    embeds: list[np.ndarray] = []
    next_id = 1
    for frame in frames:
        track_in = np.stack(embeds) if embeds else None
        out = model.infer(frame, expression, track_in, [tr.id for tr in live], noise_seed * 100003 + frame.t)
        n = out.num_detect
        if len(out.scores) != n + len(live):
            raise ValidationError(f"model returned {len(out.scores)} rows for {n} detect + {len(live)} track queries")

        held = []
        kept, kept_embeds = [], []
        for j, tr in enumerate(live):
            row = n + j
            s, r = float(out.scores[row]), float(out.referring[row])
            accepted = s > th.confidence and r > th.beta_ref
            tr.observe(frame.t, out.boxes[row], s, r, accepted)
            tr.misses = 0 if accepted else tr.misses + 1
            if s > th.confidence:
                held.append(out.boxes[row])
            if tr.misses < th.max_misses:
                kept.append(tr)
                kept_embeds.append(out.embeddings[row])

        det = [i for i in range(n) if out.scores[i] > th.confidence and out.referring[i] > th.beta_ref]
        det.sort(key=lambda i: (-float(out.scores[i]), i))
        for i in det:
            box = out.boxes[i]
            if held and box_iou(box[None], np.asarray(held)).max() >= th.dedup_iou:
                continue
            tr = Track(next_id)
            next_id += 1
            tr.observe(frame.t, box, out.scores[i], out.referring[i], True)
            tracks.append(tr)
            kept.append(tr)
            kept_embeds.append(out.embeddings[i])
            held.append(box)
        live, embeds = kept, kept_embeds
    return tracks


def tracks_to_frames(tracks: Sequence[Track], frames: Sequence[int]) -> list[dict]:
    """Per-frame prediction rows ``{"t", "tracks": [{"id", "box", "score", "ref"}]}``."""
    rows = {t: [] for t in frames}
    for tr in tracks:
        for t, box, ok, (s, r) in zip(tr.frames, tr.boxes, tr.referred, tr.scores):
            if ok:
                rows.setdefault(t, []).append({"id": tr.id, "box": box, "score": s, "ref": r})
    return [{"t": t, "tracks": sorted(rows[t], key=lambda e: e["id"])} for t in sorted(rows)]


def write_predictions(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rows.append({"t": int(row["t"]), "tracks": [
                    {"id": int(e["id"]), "box": [float(x) for x in e["box"]],
                     "score": float(e.get("score", 1.0)), "ref": float(e.get("ref", 1.0))}
                    for e in row["tracks"]]})
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{n}: malformed prediction row ({exc})") from exc
    return rows


class OracleModel:
    """Test double whose heads reproduce the scene ground truth exactly.

    Detection rows emit one confident box per object (padded with zero-score rows); the
    referring score is 1 for objects the oracle selects. Track rows carry the object id
    in their embedding and re-emit that object's current box, or a zero score once the
    object has left the frame.
    """

    def __init__(self, num_queries: int = 20, lexicon=None):
        self.num_queries = num_queries
        self.lexicon = lexicon

    def infer(self, frame, expression, track, track_ids, noise_seed):
        referred = referring_oracle(expression, frame, self.lexicon)
        objs = frame.by_id()
        n = max(self.num_queries, len(objs))
        rows = []
        for obj in frame.objects:
            rows.append((obj.box, 1.0, float(obj.id in referred), obj.id))
        rows += [((0.5, 0.5, 0.1, 0.1), 0.0, 0.0, -1)] * (n - len(rows))
        for emb in (track if track is not None else []):
            oid = int(emb[0])
            obj = objs.get(oid)
            if obj is None:
                rows.append(((0.5, 0.5, 0.1, 0.1), 0.0, 0.0, oid))
            else:
                rows.append((obj.box, 1.0, float(oid in referred), oid))
        return StepOutput(
            boxes=np.array([r[0] for r in rows], dtype=np.float64),
            scores=np.array([r[1] for r in rows]),
            referring=np.array([r[2] for r in rows]),
            embeddings=np.array([[r[3]] for r in rows], dtype=np.float64),
            num_detect=n,
        )
