"""Minimal reverse-mode autodiff on numpy arrays.

Every trainable component in this package runs on this engine: tensors wrap
numpy arrays, ops record backward closures, and ``backward()`` walks the tape
in reverse topological order. Training defaults to float64 so that gradients
can be checked against central finite differences; float32 is supported for
rendering throughput.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / rendering)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data, dtype=np.float64 if not isinstance(data, np.ndarray) else None)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- graph bookkeeping ------------------------------------------------

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._backward is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.tracked:
                        continue
                    acc = grads.get(id(parent))
                    grads[id(parent)] = pg if acc is None else acc + pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return mul(self, power(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, tracked={self.tracked})"


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.tracked for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _make(data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** p

    def backward(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _make(data, (a,), backward)


def texp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        return ((a, g * data),)

    return _make(data, (a,), backward)


def tlog(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        return ((a, g / a.data),)

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return ((a, g * (a.data > 0)),)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        return ((a, g * (1.0 - data * data)),)

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return ((a, g * data * (1.0 - data)),)

    return _make(data, (a,), backward)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    # overflow-safe: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        return ((a, g / (1.0 + np.exp(-a.data))),)

    return _make(data, (a,), backward)


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    data = np.cumsum(a.data, axis=axis)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return ((a, rev),)

    return _make(data, (a,), backward)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: operand shapes {a.shape} vs {b.shape}")
    d = a - b
    return tmean(mul(d, d))


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(old)),)

    return _make(data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return ((a, g.transpose(inv)),)

    return _make(data, (a,), backward)


def take(a, idx) -> Tensor:
    """General slicing/indexing; backward scatter-adds into the source."""
    a = _as_tensor(a)
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return ((a, out),)

    return _make(data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, pieces))

    return _make(data, tuple(tensors), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: operand shapes {a.shape} vs {b.shape}") from e

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _make(data, (a, b), backward)


# -- layer primitives --------------------------------------------------------


def affine(x, w, b) -> Tensor:
    """x @ w + b with x: (..., C_in), w: (C_in, C_out), b: (C_out,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: input shape {x.shape} vs weight shape {w.shape}")
    return add(matmul(x, w), b)


def conv1d(x, w, b=None, dilation: int = 1, padding: str = "same") -> Tensor:
    """Dilated 1D convolution.

    x: (B, C_in, T), w: (C_out, C_in, K), b: (C_out,). `same` pads
    symmetrically with zeros so the output length equals T; `valid` yields
    T - dilation*(K-1).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if dilation < 1:
        raise ValueError(f"conv1d: dilation must be >= 1, got {dilation}")
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input shape {x.shape} vs kernel shape {w.shape}")
    B, Cin, T = x.shape
    Cout, _, K = w.shape
    span = dilation * (K - 1)
    if padding == "same":
        pl, pr = span // 2, span - span // 2
    elif padding == "valid":
        pl = pr = 0
        if T - span < 1:
            raise ShapeError(f"conv1d: input length {T} too short for kernel span {span + 1}")
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    Tout = T + pl + pr - span
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    idx = (np.arange(K) * dilation)[:, None] + np.arange(Tout)[None, :]
    xg = xp[:, :, idx]  # (B, Cin, K, Tout)
    data = np.einsum("oik,bikt->bot", w.data, xg, optimize=True)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        data = data + b.data[:, None]
        parents.append(b)

    def backward(g):
        out = []
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[:, :, k * dilation:k * dilation + Tout] += np.einsum(
                "oi,bot->bit", w.data[:, :, k], g, optimize=True)
        gx = gxp[:, :, pl:pl + T] if (pl or pr) else gxp
        out.append((x, gx))
        gw = np.einsum("bot,bikt->oik", g, xg, optimize=True)
        out.append((w, gw))
        if b is not None:
            out.append((b, g.sum(axis=(0, 2))))
        return tuple(out)

    return _make(data, tuple(parents), backward)


def upsample_zeros(x, stride: int) -> Tensor:
    """Insert stride-1 zeros between time steps: (B, C, T) -> (B, C, (T-1)*s+1)."""
    x = _as_tensor(x)
    if stride == 1:
        return x
    B, C, T = x.shape
    data = np.zeros((B, C, (T - 1) * stride + 1), dtype=x.dtype)
    data[:, :, ::stride] = x.data

    def backward(g):
        return ((x, g[:, :, ::stride].copy()),)

    return _make(data, (x,), backward)


def conv_transpose1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Transposed 1D convolution: zero-upsample by `stride`, then convolve."""
    return conv1d(upsample_zeros(x, stride), w, b, dilation=1, padding="same")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis of (B, C, T) or the last axis of (..., C)."""
    x = _as_tensor(x)
    axis = 1 if x.data.ndim == 3 else -1
    mu = tmean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=axis, keepdims=True)
    inv = power(var + eps, -0.5)
    xhat = mul(xc, inv)
    if x.data.ndim == 3:
        gain = reshape(_as_tensor(gain), (1, -1, 1))
        bias = reshape(_as_tensor(bias), (1, -1, 1))
    return add(mul(xhat, gain), bias)


def dropout(x, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask.astype(x.dtype)))
