"""Finite-difference oracle for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, precision


def finite_difference_gradient(f: Callable[[np.ndarray], float], p, h: float = 1e-3) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` for every component."""
    if h <= 0:
        raise ValueError("step size must be positive")
    p = np.array(p, dtype=np.float64)
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(p))
        flat[i] = orig - h
        fm = float(f(p))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest componentwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(loss_fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-6) -> float:
    """Max relative error between backward and finite differences over all inputs.

    ``loss_fn`` receives one tensor per input and must return a scalar. Both
    paths run in float64.
    """
    with precision(np.float64):
        tensors = [Tensor(x, requires_grad=True) for x in inputs]
        backward(loss_fn(*tensors))
        worst = 0.0
        for k, t in enumerate(tensors):
            def f(value, k=k):
                args = [Tensor(x) for x in inputs]
                args[k] = Tensor(value)
                return loss_fn(*args).item()

            numeric = finite_difference_gradient(f, inputs[k], h)
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            worst = max(worst, relative_error(analytic, numeric))
    return worst
