"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a row-major ``numpy.ndarray``. Every differentiable
operation returns a new tensor holding its parents and a closure that maps
the upstream gradient to one gradient per parent. :func:`backward` orders the
graph reachable from a scalar loss into a :class:`Tape` (topological order)
and replays it in reverse, so each node is visited exactly once.

Recording is skipped inside :func:`no_grad` and for operations whose inputs
do not require gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; a 2-D right operand is shared across the batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    shared = b.ndim == 2
    if shared:
        # one BLAS call over all rows instead of a loop over the batch
        k = a.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.ascontiguousarray(np.swapaxes(b.data, -1, -2))), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def gather(x: Tensor, index) -> Tensor:
    """Select rows of ``x`` along axis 0; the result has shape ``index.shape + x.shape[1:]``."""
    idx = np.asarray(index, dtype=np.intp)
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for axis of length {n}")

    def backward(g):
        return (_index_add(idx.reshape(-1), g.reshape((-1,) + x.shape[1:]), x.data),)

    return _result(x.data[idx], (x,), backward, "gather")


def _index_add(flat_idx: np.ndarray, rows: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Sum ``rows`` into a zero array shaped like ``like`` at ``flat_idx``."""
    flat_idx = flat_idx % like.shape[0]
    grad = np.zeros_like(like)
    order = np.argsort(flat_idx, kind="stable")
    sorted_idx = flat_idx[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    if len(starts) == len(flat_idx):
        grad[flat_idx] = rows
    else:
        grad[sorted_idx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return grad


def scatter(x: Tensor, index, length: int) -> Tensor:
    """Place rows of ``x`` at positions ``index`` of a zero tensor with ``length`` rows."""
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    if idx.size != x.shape[0]:
        raise ShapeError(f"scatter: {idx.size} indices for {x.shape[0]} rows")
    if len(np.unique(idx)) != idx.size:
        raise ShapeError("scatter: indices must be distinct")
    out = np.zeros((length,) + x.shape[1:], dtype=x.dtype)
    out[idx] = x.data
    return _result(out, (x,), lambda g: (g[idx],), "scatter")


def take_rows(x: Tensor, index) -> Tensor:
    """Per-sample row gather: ``x`` is (B, n, ...) and ``index`` is (B, m)."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"take_rows: index shape {idx.shape} does not match batch of {x.shape}")
    b, n = x.shape[:2]
    flat = reshape(x, (b * n,) + x.shape[2:])
    return gather(flat, idx + (np.arange(b) * n)[:, None])


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# activations


def _check_finite(kind: str, x: Tensor) -> None:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"{kind}: non-finite input")


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", x)
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return _result(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), "log_softmax")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    _check_finite("gelu", x)
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d = 1.0 - t * t
        d *= 0.5 * _GELU_C * v * (1.0 + 3 * 0.044715 * v2)
        d += 0.5 * (1.0 + t)
        d *= g
        return (d,)

    return _result(out, (x,), backward, "gelu")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    _check_finite("layer_norm", x)
    if x.shape[-1] < 2:
        raise ShapeError(f"layer_norm: last axis must have size >= 2, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _result(out, (x,), backward, "layer_norm")


def activation(kind: str, x: Tensor, **kwargs) -> Tensor:
    table = {
        "softmax": softmax,
        "log_softmax": log_softmax,
        "sigmoid": sigmoid,
        "gelu": gelu,
        "layer_norm": layer_norm,
    }
    if kind not in table:
        raise ValueError(f"unknown activation {kind!r}")
    return table[kind](x, **kwargs)


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {n} rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: labels must lie in 0..{c - 1}")
    logp = reshape(log_softmax(logits, axis=-1), (n * c,))
    picked = gather(logp, labels + np.arange(n) * c)
    return mul(mean(picked), -1.0)


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the operations behind one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, output: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Tensors listed in ``params`` that the loss does not reach receive zero
    gradients, so an optimizer step can treat them uniformly.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    for p in params:
        if p.grad is None:
            p.zero_grad()
    tape = Tape.record(loss)
    if loss.requires_grad:
        tape.replay(loss)
    return tape


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Maximum relative error between backprop gradients and central differences.

    ``f`` is re-evaluated with each parameter element perturbed in place, so it
    must read the current parameter data on every call.
    """
    first = f().item()
    second = f().item()
    if first != second:
        raise RuntimeError("grad_check: f is not deterministic")
    for p in params:
        p.grad = None
    backward(f(), params)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            worst = max(worst, err)
    return worst
