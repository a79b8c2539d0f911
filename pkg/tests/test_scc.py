import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrmt import tensor as T
from cdrmt.errors import InsufficientSetError, ShapeError, ValidationError
from cdrmt.scc import (
    EmbeddingSet,
    SccParams,
    loss_angle,
    loss_dist,
    loss_pointwise,
    loss_struct,
    pair_set,
    proxy_features,
    reconstruct_all,
    reconstruct_text,
    triplet_set,
    vertex_cosine,
)
from cdrmt.tensor import Parameter, Tensor2D


def eset(points, space="original"):
    return EmbeddingSet.of(*(Tensor2D(np.asarray(p, dtype=float).reshape(1, -1)) for p in points), space=space)


def random_sets(rng, n_expr, d):
    return [rng.normal(size=(3, d)) for _ in range(n_expr)]


def similarity(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    s = math.exp(rng.uniform(math.log(0.1), math.log(10)))
    t = rng.normal(size=d) * 5
    return lambda x: s * x @ q.T + t


def huber(x):
    return 0.5 * x * x if abs(x) <= 1 else abs(x) - 0.5


# brute-force scalar oracles written directly from the loss definitions
def dist_oracle(E, F):
    pairs = list(itertools.combinations(range(len(E)), 2))
    de = [math.dist(E[i], E[j]) for i, j in pairs]
    df = [math.dist(F[i], F[j]) for i, j in pairs]
    me, mf = max(sum(de) / len(de), 1e-8), max(sum(df) / len(df), 1e-8)
    return sum(huber(a / me - b / mf) for a, b in zip(de, df))


def cos_at(p, i, j, k):
    u = [a - b for a, b in zip(p[j], p[i])]
    w = [a - b for a, b in zip(p[k], p[i])]
    return sum(a * b for a, b in zip(u, w)) / (math.hypot(*u) * math.hypot(*w))


def angle_oracle(E, F):
    total = 0.0
    n = len(E)
    for i in range(n):
        for j, k in itertools.combinations([x for x in range(n) if x != i], 2):
            total += huber(cos_at(E, i, j, k) - cos_at(F, i, j, k))
    return total


E0 = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
F0 = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]


def test_pair_oracle():
    assert abs(loss_dist(eset(E0), eset(F0)).item() - dist_oracle(E0, F0)) < 1e-12
    assert dist_oracle(E0, F0) > 0


def test_triplet_oracle():
    assert abs(loss_angle(eset(E0), eset(F0)).item() - angle_oracle(E0, F0)) < 1e-12
    assert abs(loss_struct(eset(E0), eset(F0), 0.4).item() - (dist_oracle(E0, F0) + 0.4 * angle_oracle(E0, F0))) < 1e-12


def test_right_angle_cosine():
    assert vertex_cosine([[0, 0]], [[1, 0]], [[0, 1]]) == 0.0
    with pytest.raises(ValidationError):
        vertex_cosine([[0, 0]], [[0, 0]], [[0, 1]])


@pytest.mark.parametrize("seed", range(100))
def test_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 9))
    sets = random_sets(rng, int(rng.integers(1, 4)), d)
    f = similarity(rng, d)
    E = [eset(s) for s in sets]
    F = [eset(f(s), "reconstructed") for s in sets]
    assert loss_struct(E, F, 0.4).item() < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_translation_separates_pointwise_from_struct(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(3, 4))
    t = rng.normal(size=4)
    assert loss_pointwise(eset(pts), eset(pts + t)).item() > 0
    assert loss_struct(eset(pts), eset(pts + t)).item() < 1e-10


def test_identity_and_scaling_zero():
    pts = np.random.default_rng(0).normal(size=(3, 5))
    assert loss_dist(eset(pts), eset(pts)).item() == 0.0
    assert loss_dist(eset(pts), eset(2 * pts)).item() < 1e-15
    assert loss_pointwise(eset(pts), eset(pts)).item() == 0.0


def test_lambda_zero_is_distance_only():
    a, b = eset(E0), eset(F0)
    assert loss_struct(a, b, 0.0).item() == loss_dist(a, b).item()
    with pytest.raises(ValidationError):
        loss_struct(a, b, -1.0)


def test_pointwise_huber_components():
    # a single non-zero difference of length 0.5, then of length 2
    assert loss_pointwise(eset([(0.5, 0), (0, 0), (0, 0)]), eset([(0, 0)] * 3)).item() == pytest.approx(0.125)
    assert loss_pointwise(eset([(-2.0, 0), (0, 0), (0, 0)]), eset([(0, 0)] * 3)).item() == pytest.approx(1.5)


def test_pointwise_width_mismatch():
    with pytest.raises(ShapeError):
        loss_pointwise(eset(E0), eset([(1, 2, 3)] * 3))


def test_cross_expression_population():
    assert pair_set([[0, 1, 2]]) == [(0, 1), (0, 2), (1, 2)]
    assert len(triplet_set([[0, 1, 2]])) == 3
    assert len(pair_set([list(range(6))])) == 15
    assert len(triplet_set([[0, 1, 2], [3, 4, 5]])) == 6


def test_per_expression_vs_batch():
    rng = np.random.default_rng(1)
    E = [eset(s) for s in random_sets(rng, 2, 3)]
    F = [eset(s) for s in random_sets(rng, 2, 3)]
    assert loss_dist(E, F, cross_expression=False).item() != loss_dist(E, F, cross_expression=True).item()


def test_insufficient_sets():
    single = EmbeddingSet((("so", Tensor2D([[1.0, 0.0]])),))
    with pytest.raises(InsufficientSetError):
        loss_dist(single, single)
    pair = EmbeddingSet((("so", Tensor2D([[1.0, 0.0]])), ("g", Tensor2D([[0.0, 1.0]]))))
    with pytest.raises(InsufficientSetError):
        loss_angle(pair, pair)


def test_embedding_set_validation():
    with pytest.raises(ValidationError):
        EmbeddingSet((("so", Tensor2D([[1.0]])), ("so", Tensor2D([[2.0]]))))
    with pytest.raises(ShapeError):
        EmbeddingSet((("so", Tensor2D([[1.0]])), ("g", Tensor2D([[2.0, 3.0]]))))
    with pytest.raises(ValidationError):
        EmbeddingSet((("so", Tensor2D([[1.0]])),), space="latent")


def test_collapsed_reconstruction_is_finite():
    value = loss_struct(eset(E0), eset([(1.0, 1.0)] * 3)).item()
    assert math.isfinite(value) and value > 0


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_nonnegative_and_dist_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = eset(rng.normal(size=(3, 3))), eset(rng.normal(size=(3, 3)))
    for loss in (loss_dist, loss_angle, loss_struct, loss_pointwise):
        assert loss(a, b).item() >= 0
    assert abs(loss_dist(a, b).item() - loss_dist(b, a).item()) < 1e-12


def test_loss_gradients():
    rng = np.random.default_rng(3)
    orig = [eset(rng.normal(size=(3, 5)))]
    params = [Parameter(f"r{k}", rng.normal(size=(1, 4))) for k in range(3)]
    rec = lambda: [EmbeddingSet.of(*params, space="reconstructed")]
    for loss in (loss_dist, loss_angle, loss_struct):
        assert T.finite_diff_check(lambda: loss(orig, rec()), params) < 1e-4


# --- reconstruction path -------------------------------------------------

D = 8


def test_proxy_zero_values_identity():
    p = SccParams(D, 2, np.random.default_rng(0))
    p.proxy.zero_values_()
    v = Tensor2D(np.random.default_rng(1).normal(size=(6, D)))
    fso, fsm = proxy_features(v, Tensor2D(np.ones((2, D))), Tensor2D(np.ones((3, D))), p)
    assert np.array_equal(fso.data, v.data) and np.array_equal(fsm.data, v.data)


def test_reconstruct_single_key_collapses():
    rng = np.random.default_rng(2)
    p = SccParams(D, 2, rng)
    r = rng.normal(size=(1, D))
    q = Tensor2D(rng.normal(size=(1, D)))
    a = reconstruct_text(Tensor2D(np.repeat(r, 5, axis=0)), q, p)
    b = reconstruct_text(Tensor2D(r), q, p)
    assert a.shape == (1, D)
    assert np.allclose(a.data, b.data, atol=1e-12)
    with pytest.raises(ShapeError):
        reconstruct_text(Tensor2D(r), Tensor2D(np.ones((2, D))), p)


def test_reconstruct_all_labels():
    rng = np.random.default_rng(0)
    p = SccParams(D, 2, rng)
    x = Tensor2D(rng.normal(size=(6, D)))
    out = reconstruct_all(x, x, x, p)
    assert out.space == "reconstructed" and [m[0] for m in out.members] == ["so", "sm", "g"]
    with pytest.raises(ValidationError):
        SccParams(D, 2, rng, lambda_angle=-0.1)
