"""Dense tensor math with a recorded reverse-mode trace.

Values live in numpy arrays. Most ops are 2-D (``rows x cols``) but any
leading axes are treated as batch axes, which keeps the training loop
vectorised over batch items.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

TRAIN_DTYPE = np.float32
VERIFY_DTYPE = np.float64

PARAM_GROUPS = ("expert", "fusion", "pe", "lm")


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class TraceError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    # max and min both propagate NaN, and any inf surfaces in one of them
    if arr.size and not (np.isfinite(arr.max()) and np.isfinite(arr.min())):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return arr


class Tensor:
    """A value plus the closure that pushes its gradient to its parents."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class ParamTensor(Tensor):
    """A learnable leaf. Freezing is honoured by optimizers, not by backward."""

    __slots__ = ("name", "group", "frozen")

    def __init__(self, data, name: str, group: str, frozen: bool = False):
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(np.array(data), op="param")
        _check_finite(self.data, f"parameter {name}")
        self.name = name
        self.group = group
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    @property
    def matrix(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> "ParamTensor":
        return ParamTensor(self.data.astype(dtype), self.name, self.group, self.frozen)

    def __repr__(self) -> str:
        flag = " frozen" if self.frozen else ""
        return f"ParamTensor({self.name}, group={self.group}, shape={self.shape}{flag})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # raw operands adopt the tensor operand's dtype so float32 stays float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


_RECORDING = [True]
_SKIP_FROZEN = [False]


def needs_grad(t: Tensor) -> bool:
    """True when some parameter that wants a gradient sits upstream of ``t``."""
    if isinstance(t, ParamTensor):
        return not (t.frozen and _SKIP_FROZEN[-1])
    return t._backward is not None


@contextlib.contextmanager
def skip_frozen():
    """Treat frozen parameters as constants while tracing.

    By default frozen parameters still collect gradients and only the
    optimizer ignores them; inside this block their branches of the
    backward pass are never built. Training uses it because the optimizer
    would discard those gradients anyway.
    """
    _SKIP_FROZEN.append(True)
    try:
        yield
    finally:
        _SKIP_FROZEN.pop()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a tape (inference)."""
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


def _result(data: np.ndarray, parents, backward, op: str) -> Tensor:
    _check_finite(data, op)
    if not _RECORDING[-1] or not any(needs_grad(p) for p in parents):
        # constant subgraph: nothing to record
        return Tensor(data, (), None, op)
    return Tensor(data, parents, backward, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not needs_grad(t):
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        # batched activations times a weight matrix: one large GEMM
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if needs_grad(a):
                _accum(a, (g2 @ b.data.T).reshape(a.shape))
            if needs_grad(b):
                _accum(b, a.data.reshape(-1, a.shape[-1]).T @ g2)
            return
        if needs_grad(a):
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if needs_grad(b):
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), backward, "matmul")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), backward, "swapaxes")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {tuple(shape)}") from exc

    def backward(g):
        _accum(a, g.reshape(src))

    return _result(out, (a,), backward, "reshape")


def concat(parts: Sequence[Tensor], axis: int = -2) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]} along {axis}") from exc
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accum(p, g[tuple(idx)])

    return _result(out, tuple(parts), backward, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -2) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _result(a.data[idx], (a,), backward, "slice")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table: ``out[..., :] = table[index[...], :]``."""
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, full)

    return _result(table.data[index], (table,), backward, "take_rows")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), backward, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _result(np.asarray(a.data.mean()), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out = a.data * s

    def backward(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _result(out, (a,), backward, "silu")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accum(x, dx)
        _accum(gain, _unbroadcast(g * xhat, gain.shape))
        _accum(bias, _unbroadcast(g, bias.shape))

    return _result(out, (x, gain, bias), backward, "layer_norm")


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = keep).

    Masked entries come out as exact zeros. A row with nothing to attend to
    is an error rather than a silent NaN.
    """
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("attention row with zero attendable keys")
    # exp(-inf) is an exact zero, so masked keys drop out without a second pass
    p = np.where(mask, scores.data, -np.inf).astype(scores.dtype, copy=False)
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (scores,), backward, "masked_softmax")


# ---------------------------------------------------------------------------
# composite layers
# ---------------------------------------------------------------------------


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    if bias is not None and bias.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    _check_finite(x.data, "linear input")
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def attention_forward(queries: Tensor, keys: Tensor, values: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention. Returns ``(out, weights)``.

    ``mask`` is boolean ``[..., q, k]`` with True meaning attendable.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    d = queries.shape[-1]
    if keys.shape[-1] != d:
        raise ShapeError(f"attention: query width {d} vs key width {keys.shape[-1]}")
    if keys.shape[-2] != values.shape[-2]:
        raise ShapeError("attention: keys and values disagree on length")
    scores = mul(matmul(queries, swapaxes(keys, -1, -2)), np.asarray(1.0 / math.sqrt(d), dtype=queries.dtype))
    if mask is None:
        mask = np.ones(scores.shape[-2:], dtype=bool)
    weights = masked_softmax(scores, mask)
    return matmul(weights, values), weights


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, ignore: int | None = None) -> Tensor:
    """Mean negative log-softmax over positions whose target is not ``ignore``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    keep = np.ones(targets.shape, dtype=bool) if ignore is None else targets != ignore
    if not keep.any():
        raise ValueError("cross_entropy: every position is ignored")
    live = targets[keep]
    if live.min() < 0 or live.max() >= V:
        raise ValueError(f"cross_entropy: target outside [0, {V})")
    logp = log_softmax_np(logits.data)
    safe = np.where(keep, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    count = int(keep.sum())
    loss = -(picked * keep).sum() / count
    out = np.asarray(max(loss, 0.0), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        grad = grad * (keep[..., None] / count) * g
        _accum(logits, grad.astype(logits.dtype, copy=False))

    return _result(out, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Propagate d(root)/d(leaf) into every reachable tensor's ``grad``.

    Parameter grads accumulate, so callers zero them between steps.
    """
    if not isinstance(root, Tensor):
        raise TraceError("backward needs a Tensor produced by a recorded forward pass")
    if root.data.size != 1:
        raise TraceError(f"backward root must be scalar, got shape {root.shape}")
    if not root._parents and not isinstance(root, ParamTensor):
        if root.op == "leaf":
            raise TraceError("no recorded trace: root is a bare leaf")
        return  # computed only from constants and frozen parameters
    order = _topo(root)
    for node in order:
        if not isinstance(node, ParamTensor):
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
    # non-finite values propagate, so checking what reached the leaves suffices
    for node in order:
        if isinstance(node, ParamTensor):
            _check_finite(node.grad, f"gradient of {node.name}")
    # release intermediate buffers
    for node in order:
        if not isinstance(node, ParamTensor):
            node.grad = None


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.zero_grad()


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``[..., L, D] -> [..., H, L, D/H]``."""
    *lead, L, D = x.shape
    if D % n_heads:
        raise ShapeError(f"width {D} not divisible by {n_heads} heads")
    x = reshape(x, (*lead, L, n_heads, D // n_heads))
    nd = len(lead)
    return transpose(x, (*range(nd), nd + 1, nd, nd + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, Dh = x.shape
    nd = len(lead)
    x = transpose(x, (*range(nd), nd + 1, nd, nd + 2))
    return reshape(x, (*lead, L, H * Dh))


def multihead_attention(
    xq: Tensor, xkv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, n_heads: int, mask=None
) -> tuple[Tensor, Tensor]:
    """Project, attend per head, merge, project back. Weights are ``[..., H, q, k]``."""
    q = split_heads(matmul(xq, wq), n_heads)
    k = split_heads(matmul(xkv, wk), n_heads)
    v = split_heads(matmul(xkv, wv), n_heads)
    out, weights = attention_forward(q, k, v, mask)
    return matmul(merge_heads(out), wo), weights
