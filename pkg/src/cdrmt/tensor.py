"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every numeric value in the package is a :class:`Tensor2D`: a read-only,
row-major float64 matrix. Operations are plain functions (plus the usual
operator overloads). While a :class:`GradTape` is active on the current
thread, each operation whose inputs depend on a :class:`Parameter` is
appended to it together with its vector-Jacobian product; :func:`backward`
replays the tape in reverse and accumulates ``Parameter.grad``.

Example::

    w = Parameter("w", np.ones((2, 2)))
    with GradTape() as tape:
        loss = sum_all(square(x @ w))
    backward(loss, tape)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DeterminismError, NumericError, ShapeError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _readonly(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")
    arr.flags.writeable = False
    return arr


class Tensor2D:
    """Immutable row-major real matrix."""

    __slots__ = ("data",)
    __array_priority__ = 100
    __array_ufunc__ = None  # numpy defers to the reflected operators below

    def __init__(self, data, *, _op: str = "constructor"):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor2D needs at most 2 dimensions, got shape {arr.shape}")
        self.data = _readonly(arr, _op)

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor2D":
        out = object.__new__(cls)
        out.data = _readonly(np.asarray(arr, dtype=np.float64), op)
        return out

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor2D":
        return transpose(self)


class Parameter(Tensor2D):
    """A named learnable matrix with an accumulated gradient.

    The value is replaced wholesale by :meth:`assign` (optimizer steps,
    checkpoint loads); the array itself stays read-only.
    """

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value):
        super().__init__(value, _op=f"parameter {name}")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        arr = np.array(value, dtype=np.float64).reshape(self.data.shape)
        self.data = _readonly(arr, f"assign {self.name}")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor2D:
    return x if isinstance(x, Tensor2D) else Tensor2D(x)


@dataclass
class _Node:
    op: str
    out: Tensor2D
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


class GradTape:
    """Append-only record of differentiable operations.

    Used as a context manager; tapes nest per thread and the innermost one
    receives the records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._params: dict[int, Parameter] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def tracks(self, t: Tensor2D) -> bool:
        return id(t) in self._tracked or isinstance(t, Parameter)

    def _record(self, op, out, inputs, vjp) -> None:
        live = False
        for t in inputs:
            if isinstance(t, Parameter):
                self._params[id(t)] = t
                live = True
            elif id(t) in self._tracked:
                live = True
        if live:
            self.nodes.append(_Node(op, out, inputs, vjp))
            self._tracked.add(id(out))

    @property
    def parameters(self) -> list[Parameter]:
        return list(self._params.values())


def _record(op: str, out: Tensor2D, inputs: tuple, vjp) -> Tensor2D:
    stack = _tape_stack()
    if stack:
        stack[-1]._record(op, out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i in range(2) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _check_broadcast(op: str, a: Tensor2D, b: Tensor2D) -> tuple[int, int]:
    shape = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")
        shape.append(max(da, db))
    return tuple(shape)


# --- elementwise binary -------------------------------------------------


def add(a, b) -> Tensor2D:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor2D._wrap(a.data + b.data, "add")
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor2D:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor2D._wrap(a.data - b.data, "sub")
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor2D:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor2D._wrap(a.data * b.data, "mul")
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor2D:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = Tensor2D._wrap(a.data / b.data, "div")

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out.data, b.shape)

    return _record("div", out, (a, b), vjp)


def maximum(a, b) -> Tensor2D:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    pick_a = a.data >= b.data
    out = Tensor2D._wrap(np.where(pick_a, a.data, b.data), "maximum")
    return _record(
        "maximum", out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def minimum(a, b) -> Tensor2D:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    pick_a = a.data <= b.data
    out = Tensor2D._wrap(np.where(pick_a, a.data, b.data), "minimum")
    return _record(
        "minimum", out, (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# --- linear algebra -----------------------------------------------------


def matmul(a, b) -> Tensor2D:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    out = Tensor2D._wrap(a.data @ b.data, "matmul")
    return _record("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor2D:
    a = as_tensor(a)
    out = Tensor2D._wrap(a.data.T.copy(), "transpose")
    return _record("transpose", out, (a,), lambda g: (g.T,))


# --- elementwise unary --------------------------------------------------


def _unary(op: str, a, value: np.ndarray, deriv: Callable[[np.ndarray], np.ndarray]) -> Tensor2D:
    out = Tensor2D._wrap(value, op)
    return _record(op, out, (a,), lambda g: (g * deriv(out.data),))


def exp(a) -> Tensor2D:
    a = as_tensor(a)
    return _unary("exp", a, np.exp(a.data), lambda y: y)


def log(a) -> Tensor2D:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _unary("log", a, np.log(a.data), lambda y: 1.0 / a.data)


def sqrt(a) -> Tensor2D:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NumericError("sqrt needs strictly positive input to stay differentiable")
    return _unary("sqrt", a, np.sqrt(a.data), lambda y: 0.5 / y)


def square(a) -> Tensor2D:
    a = as_tensor(a)
    return _unary("square", a, a.data * a.data, lambda y: 2.0 * a.data)


def power(a, p: float) -> Tensor2D:
    a = as_tensor(a)
    if p < 1 and (a.data <= 0).any():
        raise NumericError("fractional power of a non-positive value")
    return _unary("power", a, a.data ** p, lambda y: p * a.data ** (p - 1) if p != 0 else np.zeros_like(y))


def abs_(a) -> Tensor2D:
    a = as_tensor(a)
    return _unary("abs", a, np.abs(a.data), lambda y: np.sign(a.data))


def sigmoid(a) -> Tensor2D:
    a = as_tensor(a)
    e = np.exp(-np.abs(a.data))
    y = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary("sigmoid", a, y, lambda y: y * (1.0 - y))


def relu(a) -> Tensor2D:
    a = as_tensor(a)
    return _unary("relu", a, np.maximum(a.data, 0.0), lambda y: (a.data > 0).astype(np.float64))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor2D:
    """Tanh-form GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)

    def deriv(_):
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)

    return _unary("gelu", a, 0.5 * x * (1.0 + t), deriv)


def clip(a, lo: float, hi: float) -> Tensor2D:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _unary("clip", a, np.clip(a.data, lo, hi), lambda y: inside.astype(np.float64))


def huber(a) -> Tensor2D:
    """Elementwise Huber with unit threshold: x^2/2 inside [-1, 1], |x| - 1/2 outside."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) <= 1.0
    value = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
    return _unary("huber", a, value, lambda y: np.where(small, x, np.sign(x)))


# --- reductions and reshaping -------------------------------------------


def sum_all(a) -> Tensor2D:
    a = as_tensor(a)
    out = Tensor2D._wrap(np.array([[a.data.sum()]]), "sum_all")
    return _record("sum_all", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor2D:
    a = as_tensor(a)
    return sum_all(a) * (1.0 / (a.rows * a.cols))


def row_sum(a) -> Tensor2D:
    a = as_tensor(a)
    out = Tensor2D._wrap(a.data.sum(axis=1, keepdims=True), "row_sum")
    return _record("row_sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def row_mean(a) -> Tensor2D:
    a = as_tensor(a)
    return row_sum(a) * (1.0 / a.cols)


def col_sum(a) -> Tensor2D:
    a = as_tensor(a)
    out = Tensor2D._wrap(a.data.sum(axis=0, keepdims=True), "col_sum")
    return _record("col_sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def col_mean(a) -> Tensor2D:
    a = as_tensor(a)
    return col_sum(a) * (1.0 / a.rows)


def row_max(a) -> Tensor2D:
    """Per-row maximum as an r x 1 column; the gradient goes to the first argmax."""
    a = as_tensor(a)
    idx = a.data.argmax(axis=1)
    rows = np.arange(a.rows)
    out = Tensor2D._wrap(a.data[rows, idx].reshape(-1, 1), "row_max")

    def vjp(g):
        ga = np.zeros(a.shape)
        ga[rows, idx] = g[:, 0]
        return (ga,)

    return _record("row_max", out, (a,), vjp)


def concat_cols(parts: Sequence) -> Tensor2D:
    parts = tuple(as_tensor(p) for p in parts)
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ among shapes {[p.shape for p in parts]}")
    out = Tensor2D._wrap(np.concatenate([p.data for p in parts], axis=1), "concat_cols")
    edges = np.cumsum([0] + [p.cols for p in parts])
    return _record(
        "concat_cols", out, parts,
        lambda g: tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts))),
    )


def concat_rows(parts: Sequence) -> Tensor2D:
    parts = tuple(as_tensor(p) for p in parts)
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ among shapes {[p.shape for p in parts]}")
    out = Tensor2D._wrap(np.concatenate([p.data for p in parts], axis=0), "concat_rows")
    edges = np.cumsum([0] + [p.rows for p in parts])
    return _record(
        "concat_rows", out, parts,
        lambda g: tuple(g[edges[i]:edges[i + 1]] for i in range(len(parts))),
    )


def take_rows(a, index) -> Tensor2D:
    """Gather rows by integer index (slices allowed); repeated indices accumulate."""
    a = as_tensor(a)
    if isinstance(index, slice):
        index = np.arange(a.rows)[index]
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    out = Tensor2D._wrap(a.data[index].reshape(len(index), a.cols), "take_rows")

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, index, g)
        return (ga,)

    return _record("take_rows", out, (a,), vjp)


def take_cols(a, index) -> Tensor2D:
    a = as_tensor(a)
    if isinstance(index, slice):
        index = np.arange(a.cols)[index]
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    out = Tensor2D._wrap(a.data[:, index].reshape(a.rows, len(index)), "take_cols")

    def vjp(g):
        ga = np.zeros(a.shape)
        np.add.at(ga.T, index, g.T)
        return (ga,)

    return _record("take_cols", out, (a,), vjp)


# --- normalisation ------------------------------------------------------


def row_softmax(x) -> Tensor2D:
    """Softmax along each row, shifted by the row maximum."""
    x = as_tensor(x)
    if x.rows == 0 or x.cols == 0:
        raise ContractError("row_softmax of an empty tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor2D._wrap(y, "row_softmax")
    return _record(
        "row_softmax", out, (x,),
        lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),),
    )


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor2D:
    """Per-row standardisation followed by ``gamma * xhat + beta``.

    A constant row normalises to ``beta`` exactly.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match input {x.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    # rounding in the mean must not leak into rows that are exactly constant
    xc[x.data.max(axis=1) == x.data.min(axis=1)] = 0.0
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor2D._wrap(gamma.data * xhat + beta.data, "layer_norm")

    def vjp(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _record("layer_norm", out, (x, gamma, beta), vjp)


# --- differentiation ----------------------------------------------------


def backward(loss: Tensor2D, tape: GradTape) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(parameter) into every parameter on ``tape``.

    Returns the contribution of this call keyed by parameter name.
    Parameters the loss does not depend on receive an exact zero.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
    if not tape.tracks(loss):
        raise ContractError("loss was not produced on this tape")
    adj: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not tape.tracks(inp):
                continue
            key = id(inp)
            prev = adj.get(key)
            adj[key] = gi if prev is None else prev + gi
    out = {}
    for key, p in tape._params.items():
        g = adj.get(key)
        g = np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape)
        p.grad = p.grad + g
        out[p.name] = g
    return out


def _scalar(value) -> float:
    return value.item() if isinstance(value, Tensor2D) else float(value)


def finite_diff_errors(
    f: Callable[[], Tensor2D],
    params: Iterable[Parameter],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Relative error between taped and central-difference gradients, per parameter.

    The error for one parameter is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    with the maxima taken over the parameter's entries (0 when both vanish).
    ``max_entries`` samples that many entries per parameter (seeded) instead
    of perturbing all of them.
    """
    if not 0 < step <= 1e-2:
        raise ContractError(f"finite-difference step must lie in (0, 1e-2], got {step}")
    params = list(params)
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = f()
    if isinstance(loss, Tensor2D) and tape.tracks(loss):
        backward(loss, tape)
    if _scalar(f()) != _scalar(loss):
        raise DeterminismError("function returned different values on identical inputs")

    rng = np.random.default_rng(seed)
    errors = {}
    for p in params:
        analytic = p.grad.copy()
        base = p.data.copy()
        flat = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        numeric = np.zeros(len(flat))
        for k, i in enumerate(flat):
            idx = np.unravel_index(i, base.shape)
            trial = base.copy()
            trial[idx] = base[idx] + step
            p.assign(trial)
            plus = _scalar(f())
            trial[idx] = base[idx] - step
            p.assign(trial)
            minus = _scalar(f())
            numeric[k] = (plus - minus) / (2 * step)
        p.assign(base)
        a = analytic.reshape(-1)[flat]
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(a - numeric).max(initial=0.0)
        errors[p.name] = 0.0 if scale == 0.0 else float(diff / scale)
    return errors


def finite_diff_check(
    f: Callable[[], Tensor2D],
    params: Iterable[Parameter],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Maximum over ``params`` of :func:`finite_diff_errors`."""
    errors = finite_diff_errors(f, params, step, max_entries, seed)
    return max(errors.values(), default=0.0)


def init_uniform(rng: np.random.Generator, shape: tuple[int, int], fan_in: int | None = None) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; fan_in defaults to ``shape[0]``."""
    bound = 1.0 / math.sqrt(fan_in or shape[0])
    return rng.uniform(-bound, bound, size=shape)
