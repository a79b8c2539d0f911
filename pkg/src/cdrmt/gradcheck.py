"""Finite-difference suites for every differentiable component, at toy widths.

Each suite builds a small seeded instance, turns its inputs into parameters and
compares taped gradients of a random linear read-out against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .bif import BifParams, bif_forward
from .encoders import DecoupledFusion, fuse_decoupled_features
from .layers import Module, sinusoid_2d
from .objective import box_losses, focal_loss, referring_loss
from .psdql import AamParams, HeadParams, PsdqlParams, QueryState, aam_forward, decoder_forward, predict_heads, qsi_forward
from .scc import EmbeddingSet, SccParams, loss_angle, loss_dist, loss_struct, proxy_features, reconstruct_text
from .tensor import Parameter, Tensor2D

TOLERANCE = 1e-4
STEP = 1e-5
D = 8


@dataclass
class SuiteResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _inputs(rng, **shapes) -> dict[str, Parameter]:
    return {k: Parameter(f"in.{k}", rng.normal(size=s)) for k, s in shapes.items()}


def _params(module: Module, prefix: str) -> list[Parameter]:
    for name, p in module.named_parameters():
        p.name = f"{prefix}.{name}"
    return module.parameters()


def _check(rng, fn, params, max_entries=24) -> float:
    # fixed random read-out so every output entry carries its own weight
    w = rng.normal(size=fn().shape)
    return T.finite_diff_check(lambda: T.sum_all(fn() * w), params, STEP, max_entries, seed=1)


def _bif(rng):
    p = BifParams(D, 2, 3, 8, 1, 2, rng)
    x = _inputs(rng, v=(6, D), s=(4, D))
    fn = lambda: T.concat_rows([(f := bif_forward(x["v"], x["s"], p)).visual, f.text])
    return _check(rng, fn, list(x.values()) + _params(p, "bif"))


def _aam(rng):
    p = AamParams(D, rng)
    x = _inputs(rng, x=(5, D))
    return _check(rng, lambda: aam_forward(x["x"], p), [x["x"]] + _params(p, "aam"))


def _qsi(rng):
    p = AamParams(D, rng)
    x = _inputs(rng, q=(5, D), f=(3, D))
    return _check(rng, lambda: qsi_forward(x["q"], x["f"], p), list(x.values()) + _params(p, "aam"))


def _decoder(rng):
    p = PsdqlParams(D, 2, 2, rng)
    # unit-scale semantics make the unnormalised injection large enough to saturate
    # the second-phase self-attention, where q/k gradients then vanish; halve them
    x = _inputs(rng, det=(4, D), trk=(2, D), mem=(6, D), so=(2, D), sm=(3, D))
    for k in ("det", "trk", "so", "sm"):
        x[k].assign(x[k].data * 0.5)
    pos = Tensor2D(sinusoid_2d(2, 3, D))
    qpos = Tensor2D(rng.normal(size=(6, D)) * 0.5)
    bias = Tensor2D(rng.normal(size=(6, 6)) * 0.5)

    def fn():
        qs = QueryState(x["det"], x["trk"], [1, 2])
        return decoder_forward(qs, x["mem"], x["so"], x["sm"], 2, p, memory_pos=pos, query_pos=qpos, attn_bias=bias)

    return _check(rng, fn, list(x.values()) + _params(p, "dec"))


def _heads(rng):
    p = HeadParams(D, rng)
    x = _inputs(rng, q=(4, D))

    def fn():
        out = predict_heads(x["q"], p)
        return T.concat_cols([out.boxes, out.scores, out.referring])

    return _check(rng, fn, [x["q"]] + _params(p, "heads"))


def _fusion(rng):
    p = DecoupledFusion(6, D, rng)
    x = _inputs(rng, f=(3, 6), s=(4, D))
    return _check(rng, lambda: fuse_decoupled_features(x["f"], x["s"], p), list(x.values()) + _params(p, "fuse"))


def _proxy(rng):
    p = SccParams(D, 2, rng)
    x = _inputs(rng, v=(6, D), so=(2, D), sm=(3, D))
    fn = lambda: T.concat_rows(list(proxy_features(x["v"], x["so"], x["sm"], p)))
    return _check(rng, fn, list(x.values()) + _params(p.proxy, "proxy"))


def _reconstruct(rng):
    p = SccParams(D, 2, rng)
    x = _inputs(rng, feat=(5, D), q=(1, D))
    params = list(x.values()) + _params(p.decoder_attn, "attn") + _params(p.decoder_ffn, "ffn")
    return _check(rng, lambda: reconstruct_text(x["feat"], x["q"], p), params)


def _sets(rng, n_expr=2, d_orig=6):
    orig = [EmbeddingSet.of(*(Tensor2D(rng.normal(size=(1, d_orig))) for _ in range(3))) for _ in range(n_expr)]
    rec_p = [[Parameter(f"rec.{e}.{k}", rng.normal(size=(1, D))) for k in range(3)] for e in range(n_expr)]
    rec = lambda: [EmbeddingSet.of(*r, space="reconstructed") for r in rec_p]
    return orig, rec, [p for r in rec_p for p in r]


def _scc_loss(loss):
    def suite(rng):
        orig, rec, params = _sets(rng)
        return T.finite_diff_check(lambda: loss(orig, rec()), params, STEP)

    return suite


def _focal(rng):
    s = Parameter("scores", rng.uniform(0.1, 0.9, size=(6, 1)))
    t = (rng.random(6) < 0.5).astype(float)
    return T.finite_diff_check(lambda: focal_loss(s, t), [s], STEP)


def _boxes(rng):
    gt = np.column_stack([rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))])
    pred = Parameter("boxes", gt + rng.uniform(-0.05, 0.05, size=gt.shape))

    def fn():
        l1, giou = box_losses(pred, gt)
        return l1 + 3.0 * giou

    return T.finite_diff_check(fn, [pred], STEP)


def _ref(rng):
    s = Parameter("ref", rng.uniform(0.1, 0.9, size=(5, 1)))
    y = [1.0, 0.0, 1.0, 1.0, 0.0]
    return T.finite_diff_check(lambda: referring_loss(s, y), [s], STEP)


SUITES: dict[str, Callable[[np.random.Generator], float]] = {
    "bif_forward": _bif,
    "aam_forward": _aam,
    "qsi_forward": _qsi,
    "decoder_forward": _decoder,
    "predict_heads": _heads,
    "fuse_decoupled_features": _fusion,
    "proxy_features": _proxy,
    "reconstruct_text": _reconstruct,
    "loss_dist": _scc_loss(loss_dist),
    "loss_angle": _scc_loss(loss_angle),
    "loss_struct": _scc_loss(lambda a, b: loss_struct(a, b, 0.4)),
    "focal_loss": _focal,
    "box_losses": _boxes,
    "referring_loss": _ref,
}


def run_suites(names=None, seed: int = 0) -> list[SuiteResult]:
    """Run the named suites (all by default) and report each one's max relative error."""
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    results = []
    index = {name: i for i, name in enumerate(SUITES)}
    for name in names:
        start = time.perf_counter()
        # keyed by suite, so a subset sees the same draws as the full run
        err = SUITES[name](np.random.default_rng([seed, index[name]]))
        results.append(SuiteResult(name, float(err), time.perf_counter() - start))
    return results
