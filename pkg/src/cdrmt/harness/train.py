"""Training driver: per-frame losses over (scene, expression) clips with track-query carry-over."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..config import RunConfig
from ..errors import NumericError
from ..model import CdrmtModel
from ..objective import FrameLosses, LossWeights, box_losses, focal_loss, hungarian_match, referring_loss, total_loss
from ..optim import make_optimizer
from ..scc import loss_struct
from ..tensor import GradTape, Tensor2D
from . import checkpoint
from .benchmark import Benchmark, build_benchmark, frame_noise_seed
from .scenes import SceneFrame

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "scene", "expression", "t", "total") + tuple(
    f.name for f in FrameLosses.__dataclass_fields__.values()) + ("struct",)


@dataclass
class _Carried:
    object_id: int
    embedding: np.ndarray
    misses: int = 0


@dataclass
class TrainResult:
    model: CdrmtModel
    rows: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    scc_built: int = 0  # frames on which the reconstruction branch was constructed


def _term(name: str, fn):
    try:
        value = fn()
    except NumericError as exc:
        raise NumericError(f"non-finite loss term {name!r}: {exc}") from exc
    if isinstance(value, Tensor2D) and not np.isfinite(value.data).all():
        raise NumericError(f"non-finite loss term {name!r}")
    return value


def frame_losses(out, frame: SceneFrame, referred: set[int], carried: list[_Carried], cfg: RunConfig, weights: LossWeights):
    """Loss components for one frame plus the matching used to pick newborn tracks.

    Detection queries are matched against every object in the frame; track queries are
    supervised against the object whose identity they carry.
    """
    n = cfg.model.num_queries
    lc = cfg.loss
    p = out.predictions
    objs = frame.objects
    gt_boxes = np.array([o.box for o in objs], dtype=np.float64).reshape(-1, 4)
    det_rows = list(range(n))
    assign = hungarian_match(p.boxes.data[:n], p.scores.data[:n, 0], gt_boxes, weights)
    norm = max(1, len(objs))
    fl = FrameLosses()

    targets = np.zeros(n)
    for r, _ in assign.pairs:
        targets[r] = 1.0
    fl.det_cls = _term("det_cls", lambda: focal_loss(T.take_rows(p.scores, det_rows), targets, lc.focal_alpha, lc.focal_gamma) * (n / norm))
    if assign.pairs:
        rows = [r for r, _ in assign.pairs]
        gidx = [g for _, g in assign.pairs]
        l1, giou = _term("det_box", lambda: box_losses(T.take_rows(p.boxes, rows), gt_boxes[gidx]))
        fl.det_l1 = _term("det_l1", lambda: l1 * (1.0 / norm))
        fl.det_giou = _term("det_giou", lambda: giou * (1.0 / norm))
        labels = [float(objs[g].id in referred) for g in gidx]
        fl.det_ref = _term("det_ref", lambda: referring_loss(T.take_rows(p.referring, rows), labels))

    if carried:
        present = frame.by_id()
        trk_rows = list(range(n, n + len(carried)))
        live = [(n + j, present[c.object_id]) for j, c in enumerate(carried) if c.object_id in present]
        tt = np.array([float(c.object_id in present) for c in carried])
        tnorm = max(1, len(live))
        fl.trk_cls = _term("trk_cls", lambda: focal_loss(T.take_rows(p.scores, trk_rows), tt, lc.focal_alpha, lc.focal_gamma) * (len(carried) / tnorm))
        if live:
            rows = [r for r, _ in live]
            boxes = np.array([o.box for _, o in live])
            l1, giou = _term("trk_box", lambda: box_losses(T.take_rows(p.boxes, rows), boxes))
            fl.trk_l1 = _term("trk_l1", lambda: l1 * (1.0 / tnorm))
            fl.trk_giou = _term("trk_giou", lambda: giou * (1.0 / tnorm))
            labels = [float(o.id in referred) for _, o in live]
            fl.trk_ref = _term("trk_ref", lambda: referring_loss(T.take_rows(p.referring, rows), labels))
    return fl, assign


def next_carried(out, frame: SceneFrame, referred: set[int], carried: list[_Carried], assign, n: int, max_misses: int) -> list[_Carried]:
    """Training-side mirror of the inference track policy, driven by ground truth."""
    decoded = CdrmtModel.carry_state(out)
    present = frame.by_id()
    kept = []
    for j, c in enumerate(carried):
        if c.object_id not in present:
            continue
        misses = 0 if c.object_id in referred else c.misses + 1
        if misses < max_misses:
            kept.append(_Carried(c.object_id, decoded[n + j].copy(), misses))
    held = {c.object_id for c in carried if c.object_id in present}
    for r, g in assign.pairs:
        oid = frame.objects[g].id
        if oid in referred and oid not in held:
            kept.append(_Carried(oid, decoded[r].copy()))
    return kept


def _fmt(v) -> str:
    return repr(float(v.item() if isinstance(v, Tensor2D) else v))


def train_loop(cfg: RunConfig, bench: Benchmark | None = None, log_path: str | Path | None = None,
               ckpt_path: str | Path | None = None, progress=None) -> TrainResult:
    """Train a fresh model on ``bench`` (default: the configured benchmark) and return it."""
    cfg.validate()
    if bench is None:
        bench = build_benchmark(cfg.data.num_scenes, cfg.data.scene, cfg.data.expressions, cfg.seed)
    model = CdrmtModel(cfg.model, seed=cfg.seed, lambda_angle=cfg.loss.lambda_angle)
    lc = cfg.loss
    weights = LossWeights(lc.cls, lc.l1, lc.giou, lc.ref, lc.struct)
    embed_ids = {id(p) for p in model.embedder_parameters}
    core = [p for p in model.parameters() if id(p) not in embed_ids]
    tc = cfg.train
    opt = make_optimizer(tc.optimizer, core, model.embedder_parameters, tc.lr, tc.lr_embed)
    decay_epoch = tc.decay_epoch if tc.decay_epoch is not None else max(1, (tc.epochs * 2) // 3)
    n = cfg.model.num_queries
    build_scc = weights.struct > 0

    visual = {}
    for s, frames in enumerate(bench.scenes):
        for f in frames:
            visual[(s, f.t)] = model.visual_inputs(f, frame_noise_seed(bench.seeds[s], f.t))
    referred = {(s, e): bench.referred(s, e) for s, e in bench.clips()}

    result = TrainResult(model)
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(tc.epochs):
            opt.scale = tc.decay_factor if epoch >= decay_epoch else 1.0
            order = np.random.default_rng(cfg.seed + 7919 * (epoch + 1)).permutation(len(bench.clips()))
            clips = bench.clips()
            for k in order:
                s, e = clips[k]
                text = model.text_inputs(bench.expressions[e])
                carried: list[_Carried] = []
                for i, frame in enumerate(bench.scenes[s]):
                    ref_ids = referred[(s, e)][i]
                    track = Tensor2D(np.stack([c.embedding for c in carried])) if carried else None
                    with GradTape() as tape:
                        out = model.forward(visual[(s, frame.t)], text, track, [c.object_id for c in carried],
                                            with_reconstruction=build_scc)
                        fl, assign = frame_losses(out, frame, ref_ids, carried, cfg, weights)
                        struct = 0.0
                        if build_scc:
                            result.scc_built += 1
                            struct = _term("struct", lambda: loss_struct(
                                text.originals, out.reconstructed, lc.lambda_angle, lc.scc_cross_expression))
                        total = _term("total", lambda: total_loss(fl, struct, weights, is_first_frame=i == 0))
                    opt.zero_grad()
                    T.backward(total, tape)
                    opt.clip_grad_norm(tc.clip_norm)
                    opt.step()
                    carried = next_carried(out, frame, ref_ids, carried, assign, n, cfg.thresholds.max_misses)
                    row = {"epoch": epoch, "step": step, "scene": s, "expression": e, "t": frame.t,
                           "total": total.item(), **{k2: float(v.item() if isinstance(v, Tensor2D) else v) for k2, v in fl.items()},
                           "struct": float(struct.item() if isinstance(struct, Tensor2D) else struct)}
                    result.rows.append(row)
                    if writer is not None:
                        writer.writerow([row[c] if isinstance(row[c], int) else _fmt(row[c]) for c in LOG_COLUMNS])
                    step += 1
            if progress is not None:
                progress(epoch, result)
    finally:
        if fh is not None:
            fh.close()
    result.seconds = time.perf_counter() - start
    if ckpt_path is not None:
        checkpoint.save(model, ckpt_path, cfg.to_dict())
    return result


def load_model(path: str | Path) -> tuple[CdrmtModel, RunConfig]:
    arrays, config = checkpoint.read(path)
    cfg = RunConfig.from_dict(config) if config else RunConfig()
    model = CdrmtModel(cfg.model, seed=cfg.seed, lambda_angle=cfg.loss.lambda_angle)
    checkpoint.load_into(model, arrays)
    return model, cfg
