"""Small parameterised building blocks on top of :mod:`cdrmt.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Parameter, Tensor2D


class Module:
    """Parameter container; attributes that are Parameters, Modules or lists of Modules
    are discovered in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def rename_parameters(self) -> None:
        """Set every ``Parameter.name`` to its dotted attribute path."""
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter("weight", T.init_uniform(rng, (fan_in, fan_out)))
        self.bias = Parameter("bias", T.init_uniform(rng, (1, fan_out), fan_in)) if bias else None

    def __call__(self, x: Tensor2D) -> Tensor2D:
        if x.cols != self.weight.rows:
            raise ShapeError(f"Linear expects width {self.weight.rows}, got input shape {x.shape}")
        y = x @ self.weight
        return y if self.bias is None else y + self.bias

    def zero_(self) -> "Linear":
        self.weight.assign(np.zeros(self.weight.shape))
        if self.bias is not None:
            self.bias.assign(np.zeros(self.bias.shape))
        return self

    def identity_(self) -> "Linear":
        w = np.zeros(self.weight.shape)
        n = min(w.shape)
        w[np.arange(n), np.arange(n)] = 1.0
        self.weight.assign(w)
        if self.bias is not None:
            self.bias.assign(np.zeros(self.bias.shape))
        return self


class LayerNorm(Module):
    EPS = 1e-5

    def __init__(self, width: int):
        self.gamma = Parameter("gamma", np.ones((1, width)))
        self.beta = Parameter("beta", np.zeros((1, width)))

    def __call__(self, x: Tensor2D) -> Tensor2D:
        return T.layer_norm(x, self.gamma, self.beta, self.EPS)


class Attention(Module):
    """Single-head scaled dot-product attention, ``softmax(qWq (kWk)^T / sqrt(d)) vWv``.

    No biases and no output projection.
    """

    def __init__(self, q_width: int, kv_width: int, d: int, rng: np.random.Generator):
        self.w_q = Parameter("w_q", T.init_uniform(rng, (q_width, d)))
        self.w_k = Parameter("w_k", T.init_uniform(rng, (kv_width, d)))
        self.w_v = Parameter("w_v", T.init_uniform(rng, (kv_width, d)))
        self.d = d
        self.last_weights: Tensor2D | None = None

    def __call__(self, q: Tensor2D, k: Tensor2D, v: Tensor2D, bias: Tensor2D | None = None) -> Tensor2D:
        if q.cols != self.w_q.rows or k.cols != self.w_k.rows or v.cols != self.w_v.rows:
            raise ShapeError(
                f"attention widths {q.shape}, {k.shape}, {v.shape} do not match "
                f"projections {self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}"
            )
        if k.rows != v.rows:
            raise ShapeError(f"attention keys {k.shape} and values {v.shape} differ in length")
        scores = (q @ self.w_q) @ (k @ self.w_k).T * (1.0 / math.sqrt(self.d))
        if bias is not None:
            scores = scores + bias
        weights = T.row_softmax(scores)
        self.last_weights = weights
        return weights @ (v @ self.w_v)


class FeedForward(Module):
    """Two-layer MLP with a GELU gate in between."""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng)

    def __call__(self, x: Tensor2D) -> Tensor2D:
        return self.fc2(T.gelu(self.fc1(x)))

    def zero_(self) -> "FeedForward":
        self.fc2.zero_()
        return self


def sinusoid_1d(length: int, d: int) -> np.ndarray:
    """Fixed sinusoidal encoding by integer position, ``length x d``."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    freq = 1.0 / (10000.0 ** (2 * i / d))
    out = np.zeros((length, d))
    out[:, 0 : 2 * (d // 2) : 2] = np.sin(pos * freq)
    out[:, 1 : 2 * (d // 2) : 2] = np.cos(pos * freq)
    return out


def sinusoid_2d(h: int, w: int, d: int) -> np.ndarray:
    """2-D sinusoidal encoding for a row-major ``h x w`` grid: half the channels
    encode the row coordinate, half the column, both normalised to [0, 2pi]."""
    half = d // 2
    quarter = half // 2
    freq = 1.0 / (100.0 ** (np.arange(quarter, dtype=np.float64) / max(quarter, 1)))

    def axis(n):
        coord = (np.arange(n, dtype=np.float64) + 0.5) / n * 2 * math.pi
        enc = np.zeros((n, half))
        enc[:, 0 : 2 * quarter : 2] = np.sin(coord[:, None] * freq)
        enc[:, 1 : 2 * quarter : 2] = np.cos(coord[:, None] * freq)
        return enc

    ys, xs = axis(h), axis(w)
    out = np.zeros((h * w, d))
    out[:, :half] = np.repeat(ys, w, axis=0)
    out[:, half : 2 * half] = np.tile(xs, (h, 1))
    return out


def sinusoid_points(yx: np.ndarray, d: int) -> np.ndarray:
    """Encoding of continuous (y, x) points in [0, 1]; a cell centre of an ``h x w`` grid
    gets exactly its :func:`sinusoid_2d` row."""
    yx = np.asarray(yx, dtype=np.float64).reshape(-1, 2)
    half = d // 2
    quarter = half // 2
    freq = 1.0 / (100.0 ** (np.arange(quarter, dtype=np.float64) / max(quarter, 1)))
    out = np.zeros((len(yx), d))
    for k in range(2):
        ang = yx[:, k : k + 1] * 2 * math.pi * freq
        out[:, k * half : k * half + 2 * quarter : 2] = np.sin(ang)
        out[:, k * half + 1 : k * half + 2 * quarter : 2] = np.cos(ang)
    return out
