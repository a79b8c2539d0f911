import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdrmt import tensor as T
from cdrmt.encoders import (
    NOISE_AMPLITUDE,
    PAD_TOKEN,
    VELOCITY_CHANNEL,
    DecoupledFusion,
    background_noise,
    cell_coverage,
    embed_scene,
    embed_text,
    fuse_decoupled_features,
    object_encoding,
)
from cdrmt.errors import ShapeError, ValidationError
from cdrmt.harness.scenes import SceneFrame, SceneObject
from cdrmt.tensor import Parameter, Tensor2D


def obj(box, cat="car", color="red", speed=(0.0, 0.0), oid=1):
    return SceneObject(oid, box, cat, color, speed, "parked")


def test_same_token_same_row():
    e = embed_text(["car", "car", "left"], 16, seed=3)
    assert np.array_equal(e.tokens.data[0], e.tokens.data[1])
    assert not np.array_equal(e.tokens.data[0], e.tokens.data[2])


def test_pooled_is_mean():
    e = embed_text(["a", "black", "cars"], 12)
    assert np.allclose(e.pooled.data, e.tokens.data.mean(axis=0, keepdims=True), atol=1e-15)


def test_pooled_of_identical_tokens():
    e = embed_text(["red"] * 4, 8)
    assert np.allclose(e.pooled.data[0], e.tokens.data[0], atol=1e-15)


def test_pooled_of_opposite_rows_is_zero():
    # mean symmetry checked on the pooling rule itself
    v = embed_text(["red"], 8).tokens.data
    assert np.allclose(np.vstack([v, -v]).mean(axis=0), 0.0)


def test_empty_tokens_padded():
    e = embed_text([], 8)
    assert e.tokens.shape == (1, 8)
    assert np.array_equal(e.tokens.data, embed_text([PAD_TOKEN], 8).tokens.data)


def test_seed_changes_embedding():
    assert not np.array_equal(embed_text(["car"], 8, seed=0).tokens.data, embed_text(["car"], 8, seed=1).tokens.data)


def test_text_width_minimum():
    with pytest.raises(ValidationError):
        embed_text(["car"], 3)


@given(st.lists(st.text("abcdefgh", min_size=1, max_size=6), min_size=1, max_size=5), st.integers(0, 5))
def test_embed_text_is_pure(tokens, seed):
    a, b = embed_text(tokens, 8, seed), embed_text(list(tokens), 8, seed)
    assert np.array_equal(a.tokens.data, b.tokens.data)


# --- scenes -------------------------------------------------------------


def test_empty_frame_is_noise():
    grid = embed_scene(SceneFrame(0, ()), 4, 5, 12, seed=7)
    assert grid.grid.shape == (20, 12)
    assert np.array_equal(grid.grid.data, background_noise(4, 5, 12, 7))
    assert np.abs(grid.grid.data).max() <= NOISE_AMPLITUDE


def test_single_cell_object():
    h, w, c = 4, 4, 12
    box = (0.375, 0.625, 0.25, 0.25)  # exactly cell (row 2, col 1)
    o = obj(box, "person", "blue", (0.02, -0.01))
    grid = embed_scene(SceneFrame(0, (o,)), h, w, c, seed=2).grid.data
    noise = background_noise(h, w, c, 2)
    # independent enumeration of cells by their corner coordinates
    for i in range(h):
        for j in range(w):
            inside = (j / w >= 0.25 - 1e-12 and (j + 1) / w <= 0.5 + 1e-12
                      and i / h >= 0.5 - 1e-12 and (i + 1) / h <= 0.75 + 1e-12)
            expect = noise[i * w + j] + (object_encoding("person", "blue", (0.02, -0.01), c) if inside else 0)
            assert np.allclose(grid[i * w + j], expect, atol=1e-12)


def test_object_encoding_layout():
    enc = object_encoding("car", "silver", (0.05, 0.0), 12)
    assert enc[0] == 1 and enc[1] == 0
    assert enc[2 + 4] == 1  # silver is the fifth colour
    assert enc[VELOCITY_CHANNEL] == pytest.approx(0.5)
    assert not enc[VELOCITY_CHANNEL + 2 :].any()


def test_cell_coverage_matches_area():
    cover = cell_coverage((0.5, 0.5, 0.5, 0.3), 8, 8)
    assert cover.sum() / 64 == pytest.approx(0.15)
    assert cover.max() <= 1 + 1e-12


def test_identical_frames_identical_grids():
    f = SceneFrame(0, (obj((0.3, 0.3, 0.2, 0.2)),))
    assert np.array_equal(embed_scene(f, 6, 6, 12, 1).grid.data, embed_scene(f, 6, 6, 12, 1).grid.data)


def test_box_outside_image_rejected():
    with pytest.raises(ValidationError):
        embed_scene(SceneFrame(0, (obj((0.95, 0.5, 0.2, 0.2)),)), 4, 4, 12)


def test_grid_bound():
    objs = tuple(obj((0.3 + 0.1 * k, 0.5, 0.2, 0.2), speed=(0.08, 0), oid=k) for k in range(3))
    grid = embed_scene(SceneFrame(0, objs), 8, 8, 12).grid.data
    per_obj = max(np.abs(object_encoding("car", "red", (0.08, 0), 12)).max(), 1.0)
    assert np.abs(grid).max() <= len(objs) * per_obj + NOISE_AMPLITUDE


# --- fusion -------------------------------------------------------------


def test_fusion_zero_context_identity_projections():
    d = 6
    p = DecoupledFusion(d, d, np.random.default_rng(0))
    p.proj.identity_()
    p.out.identity_()
    f = np.random.default_rng(1).normal(size=(3, d))
    out = fuse_decoupled_features(Tensor2D(f), Tensor2D(np.zeros((4, d))), p).data
    joined = np.hstack([f, f])
    ln = (joined - joined.mean(1, keepdims=True)) / np.sqrt(joined.var(1, keepdims=True) + 1e-5)
    assert np.allclose(out, ln[:, :d], atol=1e-12)


def test_fusion_shapes_and_errors():
    p = DecoupledFusion(5, 8, np.random.default_rng(0))
    out = fuse_decoupled_features(embed_text(["car"], 5), Tensor2D(np.ones((3, 8))), p)
    assert out.shape == (1, 8)
    with pytest.raises(ShapeError):
        p(Tensor2D(np.ones((1, 5))), Tensor2D(np.ones((3, 7))))


def test_fusion_ln_last_row_mean_is_beta():
    p = DecoupledFusion(5, 8, np.random.default_rng(0), ln_last=True)
    p.norm.beta.assign(np.full((1, 8), 0.25))
    rng = np.random.default_rng(4)
    out = p(Tensor2D(rng.normal(size=(3, 5))), Tensor2D(rng.normal(size=(2, 8)))).data
    assert np.abs(out.mean(axis=1) - 0.25).max() < 1e-6


def test_fusion_gradient():
    rng = np.random.default_rng(9)
    p = DecoupledFusion(5, 6, rng)
    f = Parameter("f", rng.normal(size=(2, 5)))
    s = rng.normal(size=(3, 6))
    w = rng.normal(size=(2, 6))
    assert T.finite_diff_check(lambda: T.sum_all(p(f, Tensor2D(s)) * w), [f]) < 1e-4
