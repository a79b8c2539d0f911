import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrmt import tensor as T
from cdrmt.errors import ValidationError
from cdrmt.objective import (
    FrameLosses,
    LossWeights,
    box_iou,
    box_losses,
    focal_loss,
    generalized_box_iou,
    hungarian_match,
    matching_cost,
    referring_loss,
    total_loss,
)
from cdrmt.tensor import Parameter, Tensor2D


def raster_giou(a, b, n=1000):
    c = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(c, c)

    def mask(box):
        cx, cy, w, h = box
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)

    ma, mb = mask(a), mask(b)
    inter, union = (ma & mb).sum(), (ma | mb).sum()
    x0 = min(a[0] - a[2] / 2, b[0] - b[2] / 2)
    x1 = max(a[0] + a[2] / 2, b[0] + b[2] / 2)
    y0 = min(a[1] - a[3] / 2, b[1] - b[3] / 2)
    y1 = max(a[1] + a[3] / 2, b[1] + b[3] / 2)
    hull = ((xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)).sum()
    return inter / union - (hull - union) / hull


@pytest.mark.parametrize("seed", range(5))
def test_giou_matches_rasterisation(seed):
    rng = np.random.default_rng(seed)

    def snapped():
        # corners on pixel boundaries, so counting pixel centres measures areas exactly
        x0, y0 = rng.integers(150, 450, 2)
        x1, y1 = rng.integers(550, 850, 2)
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0]) / 1000

    a, b = snapped(), snapped()
    _, loss = box_losses(Tensor2D(a[None]), b[None])
    assert abs((1 - loss.item()) - raster_giou(a, b)) < 1e-3
    assert abs(generalized_box_iou(a, b)[0, 0] - raster_giou(a, b)) < 1e-3


def test_box_losses_identical_and_far():
    box = np.array([[0.5, 0.5, 0.2, 0.3]])
    l1, giou = box_losses(Tensor2D(box), box)
    assert l1.item() == 0 and giou.item() == pytest.approx(0, abs=1e-15)
    far = box_losses(Tensor2D([[0.001, 0.001, 0.001, 0.001]]), [[0.999, 0.999, 0.001, 0.001]])[1].item()
    assert 1.99 < far < 2


def test_box_losses_reject_degenerate():
    with pytest.raises(ValidationError):
        box_losses(Tensor2D([[0.5, 0.5, 0.0, 0.1]]), [[0.5, 0.5, 0.1, 0.1]])
    with pytest.raises(ValidationError):
        box_losses(Tensor2D([[0.5, 0.5, 0.1, 0.1]]), [[0.5, 0.5, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1]])


boxes = st.tuples(st.floats(0.2, 0.8), st.floats(0.2, 0.8), st.floats(0.05, 0.4), st.floats(0.05, 0.4))


@given(boxes, boxes)
def test_giou_range_and_containment(a, b):
    g = generalized_box_iou(np.array(a), np.array(b))[0, 0]
    assert -1 < g <= 1 + 1e-12
    inner = (a[0], a[1], a[2] / 2, a[3] / 2)
    assert generalized_box_iou(np.array(a), np.array(inner))[0, 0] == pytest.approx(box_iou(np.array(a), np.array(inner))[0, 0])


def test_box_gradient():
    rng = np.random.default_rng(0)
    gt = np.array([[0.5, 0.5, 0.2, 0.3], [0.3, 0.6, 0.2, 0.1]])
    pred = Parameter("p", gt + rng.uniform(-0.04, 0.04, gt.shape))
    assert T.finite_diff_check(lambda: sum(box_losses(pred, gt), Tensor2D(0.0)), [pred]) < 1e-4


# --- focal / referring ------------------------------------------------


def focal_oracle(p, t, alpha, gamma):
    terms = []
    for pi, ti in zip(p, t):
        pi = min(max(pi, 1e-7), 1 - 1e-7)
        if ti:
            terms.append(-alpha * (1 - pi) ** gamma * math.log(pi))
        else:
            terms.append(-(1 - alpha) * pi ** gamma * math.log(1 - pi))
    return sum(terms) / len(terms)


def test_focal_matches_scalar_formula():
    rng = np.random.default_rng(4)
    p, t = rng.uniform(0.01, 0.99, 7), rng.integers(0, 2, 7)
    got = focal_loss(Tensor2D(p[:, None]), t).item()
    assert abs(got - focal_oracle(p, t, 0.25, 2.0)) < 1e-12


def test_focal_perfect_positive_is_zero():
    assert focal_loss(Tensor2D([[1.0]]), [1]).item() < 1e-13


def test_focal_degenerate_is_half_bce():
    p = np.array([0.2, 0.7, 0.9])
    t = np.array([1, 0, 1])
    bce = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
    assert focal_loss(Tensor2D(p[:, None]), t, alpha=0.5, gamma=0.0).item() == pytest.approx(0.5 * bce, abs=1e-12)


def test_referring_zero_at_clamps():
    assert referring_loss(Tensor2D([[1 - 1e-7], [1e-7]]), [1, 0]).item() == pytest.approx(0.0, abs=1e-15)
    assert referring_loss(Tensor2D([[1.0], [0.0]]), [1, 0]).item() == pytest.approx(0.0, abs=1e-15)
    assert referring_loss(Tensor2D([[0.5]]), [1]).item() > 0


def test_focal_and_referring_gradients():
    s = Parameter("s", np.array([[0.2], [0.6], [0.9]]))
    assert T.finite_diff_check(lambda: focal_loss(s, [1, 0, 1]), [s]) < 1e-4
    assert T.finite_diff_check(lambda: referring_loss(s, [0, 1, 1]), [s]) < 1e-4


# --- matching ----------------------------------------------------------


def test_exact_single_match():
    b = np.array([[0.4, 0.4, 0.2, 0.2]])
    m = hungarian_match(b, [0.3], b)
    assert m.pairs == [(0, 0)] and m.cost == pytest.approx(2 * 0.7)


def test_empty_gt():
    m = hungarian_match(np.full((3, 4), 0.5), [0.5] * 3, np.zeros((0, 4)))
    assert m.pairs == [] and m.unmatched == [0, 1, 2]


def test_mirror_positions():
    pred = np.array([[0.3, 0.5, 0.2, 0.2], [0.7, 0.5, 0.2, 0.2]])
    gt = pred[::-1].copy()
    assert hungarian_match(pred, [0.5, 0.5], gt).pairs == [(0, 1), (1, 0)]


@pytest.mark.parametrize("seed", range(200))
def test_matching_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, g = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    pred = np.column_stack([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))])
    gt = np.column_stack([rng.uniform(0.2, 0.8, (g, 2)), rng.uniform(0.05, 0.3, (g, 2))])
    scores = rng.uniform(size=n)
    cost = matching_cost(pred, scores, gt, LossWeights())
    k = min(n, g)
    if g <= n:  # choose an ordered set of predictions for gts 0..g-1
        best = min(sum(cost[r, c] for c, r in enumerate(rows)) for rows in itertools.permutations(range(n), k))
    else:
        best = min(sum(cost[r, c] for r, c in enumerate(cols)) for cols in itertools.permutations(range(g), k))
    m = hungarian_match(pred, scores, gt)
    assert len(m.pairs) == k
    assert abs(m.cost - best) < 1e-12
    assert len({r for r, _ in m.pairs}) == k == len({c for _, c in m.pairs})


# --- totals -------------------------------------------------------------


def ones():
    return FrameLosses(*[1.0] * 8)


def test_total_default_weights():
    assert total_loss(ones(), 1.0, LossWeights(), is_first_frame=True) == 13.0
    assert total_loss(ones(), 1.0, LossWeights(), is_first_frame=False) == 24.0
    assert total_loss(FrameLosses(), 0.0, LossWeights(), is_first_frame=False) == 0.0


def test_first_frame_excludes_track_terms():
    fl = FrameLosses(trk_cls=5.0, trk_l1=3.0)
    assert total_loss(fl, 0.0, LossWeights(), is_first_frame=True) == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValidationError):
        LossWeights(struct=-1.0)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 10), min_size=9, max_size=9), st.integers(0, 8), st.floats(0, 5))
def test_total_monotone(values, idx, bump):
    fl = FrameLosses(*values[:8])
    base = total_loss(fl, values[8], LossWeights(), False)
    bumped = list(values)
    bumped[idx] += bump
    assert total_loss(FrameLosses(*bumped[:8]), bumped[8], LossWeights(), False) >= base
