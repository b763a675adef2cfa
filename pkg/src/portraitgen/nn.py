"""Layers, parameter registration, and the Adam optimizer."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MissingGradientError(RuntimeError):
    """An optimizer step was requested for a parameter without a gradient."""


class Module:
    """Container with recursively named parameters and buffers.

    Parameter names must be unique within a model; the flat dict returned by
    ``parameters()`` is what the optimizer and checkpoint code consume.
    """

    training: bool = True

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                for n, p in val.parameters().items():
                    out[f"{key}.{n}"] = p
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for n, p in item.parameters().items():
                            out[f"{key}.{i}.{n}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key, val in vars(self).items():
            if isinstance(val, Module):
                for n, b in val.buffers().items():
                    out[f"{key}.{n}"] = b
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for n, b in item.buffers().items():
                            out[f"{key}.{i}.{n}"] = b
        local = getattr(self, "_buffers", None)
        if local:
            out.update(local)
        return out

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if not hasattr(self, "_buffers"):
            self._buffers: dict[str, np.ndarray] = {}
        self._buffers[name] = value

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for val in vars(self).values():
            if isinstance(val, Module):
                val.set_training(flag)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        item.set_training(flag)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.parameters().items()}
        for n, b in self.buffers().items():
            out[f"buf/{n}"] = b
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        bufs = self.buffers()
        for name, arr in arrays.items():
            if name.startswith("buf/"):
                key = name[4:]
                if key not in bufs:
                    raise KeyError(f"unknown buffer {key!r}")
                bufs[key][...] = arr
            else:
                if name not in params:
                    raise KeyError(f"unknown parameter {name!r}")
                if params[name].data.shape != arr.shape:
                    raise T.ShapeError(
                        f"parameter {name!r}: checkpoint shape {arr.shape} vs model {params[name].data.shape}")
                params[name].data = arr.copy()


def _param(rng: np.random.Generator, shape, scale: float, dtype=np.float64) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


class Conv1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, dilation: int = 1,
                 padding: str = "same", zero_init: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        scale = 0.0 if zero_init else 1.0 / np.sqrt(cin * kernel)
        self.w = _param(rng, (cout, cin, kernel), scale)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.dilation = dilation
        self.padding = padding

    def __call__(self, x):
        return T.conv1d(x, self.w, self.b, dilation=self.dilation, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1,
                 zero_init: bool = False, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        scale = 0.0 if zero_init else 1.0 / np.sqrt(cin * kernel)
        self.w = _param(rng, (cout, cin, kernel), scale)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride

    def __call__(self, x):
        return T.conv_transpose1d(x, self.w, self.b, stride=self.stride)


class Affine(Module):
    def __init__(self, cin: int, cout: int, zero_init: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        scale = 0.0 if zero_init else 1.0 / np.sqrt(cin)
        self.w = _param(rng, (cin, cout), scale)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return T.affine(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.g = Tensor(np.ones(channels), requires_grad=True)
        self.o = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.o, eps=self.eps)


class BatchNorm1d(Module):
    """Batch norm over (B, T) for (B, C, T) input; inference uses running stats
    with momentum 0.99."""

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.g = Tensor(np.ones(channels), requires_grad=True)
        self.o = Tensor(np.zeros(channels), requires_grad=True)
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x):
        c = x.shape[1]
        gain = T.reshape(self.g, (1, c, 1))
        bias = T.reshape(self.o, (1, c, 1))
        if self.training:
            mu = T.tmean(x, axis=(0, 2), keepdims=True)
            xc = x - mu
            var = T.tmean(T.mul(xc, xc), axis=(0, 2), keepdims=True)
            m = self.momentum
            self._buffers["running_mean"][...] = (
                m * self._buffers["running_mean"] + (1 - m) * mu.data.reshape(-1))
            self._buffers["running_var"][...] = (
                m * self._buffers["running_var"] + (1 - m) * var.data.reshape(-1))
            inv = T.power(var + self.eps, -0.5)
            return T.add(T.mul(T.mul(xc, inv), gain), bias)
        rm = self._buffers["running_mean"].reshape(1, c, 1)
        rv = self._buffers["running_var"].reshape(1, c, 1)
        xhat = T.mul(x - Tensor(rm), Tensor(1.0 / np.sqrt(rv + self.eps)))
        return T.add(T.mul(xhat, gain), bias)


class Dropout(Module):
    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def __call__(self, x, rng: np.random.Generator):
        return T.dropout(x, self.p, rng, training=self.training)


class Adam:
    """Adam with per-parameter first/second moment state.

    State is exposed as flat arrays so checkpoints can persist it alongside
    the model parameters.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.b1, self.b2
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim/t": np.array([self.t], dtype=np.float64)}
        for n in self.params:
            out[f"optim/m/{n}"] = self.m[n]
            out[f"optim/v/{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["optim/t"][0])
        for n in self.params:
            self.m[n] = arrays[f"optim/m/{n}"].copy()
            self.v[n] = arrays[f"optim/v/{n}"].copy()
