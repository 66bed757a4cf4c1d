"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a-b| / max(max|a|, max|b|)``; 0 when both vanish."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def gradcheck(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric gradients over ``inputs``."""
    for x in inputs:
        x.grad = None
    loss_fn().backward()
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        gn = numeric_grad(lambda: loss_fn().item(), x.data, h)
        worst = max(worst, rel_error(ga, gn))
    return worst
