"""Dense float64 tensors with tape-based reverse-mode autodiff.

The op set is deliberately closed: matmul, elementwise arithmetic, exp,
log, tanh, relu, prelu, pow with a constant exponent, layer norm, row
softmax, gather/scatter over rows, concat, narrow, reshape, transpose,
sum/mean reductions, and rowwise cosine similarity. Every op registers a
backward closure on the active tape; `backward` replays the tape once in
reverse. That is all the three trainable models need, and it keeps
gradient checking exhaustive.
"""

from __future__ import annotations

import os
from typing import Callable, Optional, Sequence

import numpy as np

_DEBUG_CHECKS = bool(int(os.environ.get("TXFUSE_DEBUG", "0")))


def debug_checks(enabled: bool) -> None:
    """Toggle finiteness checking after every op (slow; for debugging)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = enabled


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeEntry:
    """One recorded primitive: inputs, output, and the backward closure."""

    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive ops; inputs always precede their consumers."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


_TAPE_STACK: list[Tape] = []


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    out = Tensor(out_data)
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1].entries.append(TapeEntry(name, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate gradients of a scalar loss into every tracked tensor."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        for inp, gin in zip(entry.inputs, entry.backward_fn(g)):
            if gin is not None and inp.requires_grad:
                inp._accumulate(gin)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the pre-broadcast shape by summing."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", (a, b), out, bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record("log", (a,), out, bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _record("relu", (a,), out, bwd)


def prelu(a: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with a learnable scalar negative slope."""
    s = float(slope.data)
    out = np.where(a.data > 0.0, a.data, s * a.data)

    def bwd(g):
        ga = g * np.where(a.data > 0.0, 1.0, s)
        gs = np.array((g * np.minimum(a.data, 0.0)).sum())
        return ga, gs.reshape(slope.shape)

    return _record("prelu", (a, slope), out, bwd)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    """a ** exponent for a fixed exponent (used for powers and roots)."""
    out = np.power(a.data, exponent)

    def bwd(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _record("pow_const", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record("concat", tensors, out, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _record("narrow", (a,), out, bwd)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-d (or higher) tensor; backward scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    out = a.data[index]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _record("gather_rows", (a,), out, bwd)


def scatter_add_rows(a: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """out[index[i]] += a[i]; the segment-sum primitive for aggregation."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((num_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, index, a.data)

    def bwd(g):
        return (g[index],)

    return _record("scatter_add_rows", (a,), out, bwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _record("reduce_sum", (a,), out, bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape).copy(),)

    return _record("reduce_mean", (a,), out, bwd)


# ---------------------------------------------------------------------------
# normalization, attention, similarity
# ---------------------------------------------------------------------------

def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        d = a.shape[-1]
        gxhat = g * gain.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        del d
        return gx, ggain, gbias

    return _record("layer_norm", (a, gain, bias), out, bwd)


def softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax over the last axis, stabilized by row-max subtraction."""
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    z = a.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (out * g).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _record("softmax_rows", (a,), out, bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row log-softmax over the last axis (stable; for NLL losses)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax_rows", (a,), out, bwd)


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis; output drops that axis."""
    if a.shape != b.shape:
        raise ValueError(f"cosine_rows shape mismatch: {a.shape} vs {b.shape}")
    na = np.maximum(np.linalg.norm(a.data, axis=-1, keepdims=True), eps)
    nb = np.maximum(np.linalg.norm(b.data, axis=-1, keepdims=True), eps)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)
    out = cos[..., 0]

    def bwd(g):
        g2 = g[..., None]
        ga = g2 * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g2 * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return ga, gb

    return _record("cosine_rows", (a, b), out, bwd)


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int,
                 requires_grad: bool = True) -> Tensor:
    """Fan-in scaled uniform initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)
