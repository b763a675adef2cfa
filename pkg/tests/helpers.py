"""Shared test utilities: finite-difference gradient oracle and tiny fixtures."""

from __future__ import annotations

import numpy as np

from portraitgen import tensor as T


def finite_diff(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar fn at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-10)
    return float(np.abs(a - b).max() / denom)


def check_grad(build_loss, x0: np.ndarray, tol: float = 1e-4,
               eps: float = 1e-5) -> float:
    """build_loss(Tensor) -> scalar Tensor; compares backward vs central FD."""
    x = T.Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(x)
    loss.backward()
    analytic = x.grad.copy()

    def f(arr):
        with T.no_grad():
            return build_loss(T.Tensor(arr)).item()

    numeric = finite_diff(f, x0.copy(), eps)
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def param_grad_check(module, param_name: str, loss_fn, tol: float = 1e-3,
                     eps: float = 1e-5) -> float:
    """Check the gradient of loss_fn() w.r.t. one named module parameter."""
    params = module.parameters()
    p = params[param_name]
    loss = loss_fn()
    module.zero_grad()
    loss.backward()
    analytic = p.grad.copy()

    def f(arr):
        old = p.data
        p.data = arr
        with T.no_grad():
            val = loss_fn().item()
        p.data = old
        return val

    numeric = finite_diff(f, p.data.copy(), eps)
    err = rel_err(analytic, numeric)
    assert err < tol, f"{param_name}: rel err {err:.3e} >= {tol}"
    return err
