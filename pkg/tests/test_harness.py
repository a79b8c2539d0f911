import json

import numpy as np
import pytest

from cdrmt.config import ModelConfig
from cdrmt.errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ValidationError,
)
from cdrmt.harness import checkpoint
from cdrmt.harness.benchmark import build_benchmark, evaluate_model, gt_sequence, pred_sequence
from cdrmt.harness.oracle import referring_oracle
from cdrmt.harness.scenes import (
    SceneConfig,
    SceneFrame,
    SceneObject,
    gen_scenes,
    read_referred,
    read_scenes,
    write_referred,
    write_scenes,
)
from cdrmt.harness.tracking import (
    OracleModel,
    Track,
    TrackingThresholds,
    read_predictions,
    run_tracking,
    tracks_to_frames,
    write_predictions,
)
from cdrmt.model import CdrmtModel

SMALL = ModelConfig(d=8, text_dim=8, channels=12, grid_h=4, grid_w=4, num_queries=4,
                    decoder_layers=2, bif_layers=1, ffn_ratio=2)


def frames(seed=3, n=12):
    return gen_scenes(SceneConfig(frames=n), seed)


# --- scenes -------------------------------------------------------------


def test_static_object_never_moves():
    cfg = SceneConfig(frames=5, objects=[{"box": [0.3, 0.4, 0.2, 0.2], "cat": "car", "color": "red"}])
    boxes = {f.objects[0].box for f in gen_scenes(cfg, 0)}
    assert boxes == {(0.3, 0.4, 0.2, 0.2)}


def test_linear_motion_until_exit():
    cfg = SceneConfig(frames=10, objects=[{"box": [0.2, 0.5, 0.1, 0.1], "speed": [0.1, 0.0]}])
    xs = [f.objects[0].box[0] for f in gen_scenes(cfg, 0) if f.objects]
    assert xs == pytest.approx([0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])


def test_generator_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_scenes(frames(7), a)
    write_scenes(frames(7), b)
    assert a.read_bytes() == b.read_bytes()
    assert read_scenes(a) == frames(7)


def test_generated_frames_valid():
    for f in frames(11, 20):
        ids = [o.id for o in f.objects]
        assert len(ids) == len(set(ids)) <= 6
        for o in f.objects:
            cx, cy, w, h = o.box
            assert 0 <= cx - w / 2 and cx + w / 2 <= 1 + 1e-9


def test_invalid_config():
    with pytest.raises(ValidationError):
        gen_scenes(SceneConfig(frames=0), 0)
    with pytest.raises(ValidationError):
        gen_scenes(SceneConfig(min_objects=4, max_objects=2), 0)


def test_malformed_scene_file(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"t": 0}\n')
    with pytest.raises(ValidationError):
        read_scenes(p)


def test_referred_roundtrip(tmp_path):
    p = tmp_path / "ids.jsonl"
    write_referred([(0, {3, 1}), (1, set())], p)
    assert read_referred(p) == {0: {1, 3}, 1: set()}


# --- oracle -------------------------------------------------------------


def obj(oid, cx, cat="car", color="black", state="parked"):
    return SceneObject(oid, (cx, 0.5, 0.2, 0.2), cat, color, (0.0, 0.0), state)


def test_oracle_black_cars_on_the_right():
    f = SceneFrame(0, (obj(1, 0.8, color="black"), obj(2, 0.2, color="white")))
    assert referring_oracle("black cars in the right", f) == {1}


def test_oracle_moving_on_parked_frame():
    f = SceneFrame(0, (obj(1, 0.3), obj(2, 0.7)))
    assert referring_oracle("moving vehicles", f) == set()


def test_oracle_empty_motion_stream_vacuous():
    f = SceneFrame(0, (obj(1, 0.3, state="moving"), obj(2, 0.7)))
    assert referring_oracle("cars", f) == {1, 2}


def test_oracle_covers_all_objects():
    for f in frames(5, 20):
        assert referring_oracle("cars", f) | referring_oracle("people", f) == {o.id for o in f.objects}


# --- tracking -----------------------------------------------------------


@pytest.mark.parametrize("expr", ["cars", "people", "black cars in the right", "moving vehicles", "women"])
def test_oracle_double_reproduces_oracle(expr):
    fr = frames(2, 20)
    rows = tracks_to_frames(run_tracking(OracleModel(), fr, expr), [f.t for f in fr])
    for f, row in zip(fr, rows):
        boxes = {tuple(e["box"]) for e in row["tracks"]}
        expect = {o.box for o in f.objects if o.id in referring_oracle(expr, f)}
        assert boxes == expect


@pytest.mark.parametrize("seed", range(4))
def test_identity_stability(seed):
    fr = frames(seed, 20)
    tracks = run_tracking(OracleModel(), fr, "cars")
    owner = {}
    for tr in tracks:
        for t, box in tr.visible().items():
            oid = next(o.id for o in fr[t].objects if o.box == tuple(box))
            owner.setdefault(oid, set()).add(tr.id)
    assert all(len(ids) == 1 for ids in owner.values())


class Scaled(OracleModel):
    """Oracle with degraded scores to exercise the filters."""

    def __init__(self, score=1.0, ref_scale=1.0):
        super().__init__()
        self.score, self.ref_scale = score, ref_scale

    def infer(self, *args):
        out = super().infer(*args)
        out.scores = out.scores * self.score
        out.referring = out.referring * self.ref_scale * np.linspace(0.55, 1.0, len(out.referring))
        return out


def test_low_scores_give_no_tracks():
    assert run_tracking(Scaled(score=0.69), frames(1), "cars") == []


def test_raising_beta_never_adds_tracks():
    fr = frames(4, 15)
    counts = []
    for beta in (0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99):
        tracks = run_tracking(Scaled(), fr, "cars", TrackingThresholds(beta_ref=beta))
        counts.append(sum(len(tr.visible()) for tr in tracks))
    assert counts == sorted(counts, reverse=True)


def test_track_terminates_after_misses():
    cfg = SceneConfig(frames=8, objects=[{"box": [0.2, 0.5, 0.1, 0.1], "speed": [0.1, 0.0], "cat": "car"}])
    fr = gen_scenes(cfg, 0)
    # "cars in the left" stops referring the car once it crosses x = 0.5
    tracks = run_tracking(OracleModel(), fr, "cars in the left")
    assert len(tracks) == 1
    tr = tracks[0]
    assert sum(tr.referred) == 3 and len(tr.frames) == 6  # 3 accepted + 3 misses


def test_track_frames_must_increase():
    tr = Track(1)
    tr.observe(2, (0.5, 0.5, 0.1, 0.1), 1, 1, True)
    with pytest.raises(ValidationError):
        tr.observe(2, (0.5, 0.5, 0.1, 0.1), 1, 1, True)


def test_tracking_errors():
    with pytest.raises(ValidationError):
        run_tracking(OracleModel(), [], "cars")
    with pytest.raises(ValidationError):
        TrackingThresholds(confidence=1.5).validate()


def test_predictions_roundtrip(tmp_path):
    fr = frames(2)
    rows = tracks_to_frames(run_tracking(OracleModel(), fr, "cars"), [f.t for f in fr])
    path = tmp_path / "pred.jsonl"
    write_predictions(rows, path)
    assert read_predictions(path) == rows
    path.write_text(json.dumps({"t": 0}) + "\n")
    with pytest.raises(ValidationError):
        read_predictions(path)


def test_oracle_double_scores_perfectly_on_benchmark():
    bench = build_benchmark(2, SceneConfig(frames=8), ["cars", "black cars in the right", "women"], 5)
    res = evaluate_model(OracleModel(), bench, TrackingThresholds())
    assert res.f1 == 1.0
    assert res.report.HOTA == pytest.approx(1.0)
    seq_gt = gt_sequence(bench.scenes[0], "cars")
    assert set(seq_gt) == {f.t for f in bench.scenes[0]}
    assert pred_sequence([{"t": 0, "tracks": [{"id": 1, "box": [0, 0, 1, 1]}]}]) == {0: {1: [0, 0, 1, 1]}}


def test_parallel_evaluation_matches_serial():
    bench = build_benchmark(2, SceneConfig(frames=5), ["cars", "people"], 1)
    a = evaluate_model(OracleModel(), bench, TrackingThresholds())
    b = evaluate_model(OracleModel(), bench, TrackingThresholds(), jobs=2)
    assert a.report.as_row() == b.report.as_row() and a.f1 == b.f1


# --- checkpoint ---------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = CdrmtModel(SMALL, seed=3)
    path = tmp_path / "m.ckpt"
    checkpoint.save(model, path, {"seed": 3})
    arrays, cfg = checkpoint.read(path)
    assert cfg == {"seed": 3}
    fresh = CdrmtModel(SMALL, seed=99)
    checkpoint.load_into(fresh, arrays)
    f = frames(1)[0]
    a = model.infer(f, "black cars", None, [], 0)
    b = fresh.infer(f, "black cars", None, [], 0)
    for x, y in ((a.boxes, b.boxes), (a.scores, b.scores), (a.embeddings, b.embeddings)):
        assert np.abs(x - y).max() <= 1e-6 * max(1.0, np.abs(x).max())


def test_checkpoint_float32_exact():
    model = CdrmtModel(SMALL, seed=1)
    arrays, _ = checkpoint.loads(checkpoint.dumps(model.named_parameters()))
    for name, p in model.named_parameters():
        assert np.array_equal(arrays[name], p.data.astype(np.float32).astype(np.float64))


def test_checkpoint_errors():
    data = checkpoint.dumps(CdrmtModel(SMALL, seed=0).named_parameters())
    with pytest.raises(CheckpointTruncatedError):
        checkpoint.loads(data[:-10])
    with pytest.raises(CheckpointTruncatedError):
        checkpoint.loads(data[:12])
    with pytest.raises(CheckpointFormatError):
        checkpoint.loads(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointVersionError):
        checkpoint.loads(data[:8] + (2).to_bytes(4, "little") + data[12:])
    assert len({CheckpointFormatError.code, CheckpointVersionError.code, CheckpointTruncatedError.code}) == 3


def test_load_into_checks_everything_first():
    model = CdrmtModel(SMALL, seed=0)
    arrays, _ = checkpoint.loads(checkpoint.dumps(CdrmtModel(SMALL, seed=1).named_parameters()))
    name = next(iter(arrays))
    arrays[name] = arrays[name][:1]
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    with pytest.raises(CheckpointFormatError):
        checkpoint.load_into(model, arrays)
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())
