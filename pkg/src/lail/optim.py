"""AdamW with decoupled weight decay, gradient clipping and warmup."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .nn import Parameter
from .tensor import NumericError


class AdamW:
    """AdamW over a fixed parameter list.

    Frozen parameters and parameters without a gradient are skipped entirely:
    no moment update, no weight decay, no step count.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[int, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {p.name!r}")
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            st["step"] += 1
            t = st["step"]
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            m_hat = st["m"] / (1.0 - b1 ** t)
            v_hat = st["v"] / (1.0 - b2 ** t)
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adamw_step(params: Sequence[Parameter], optimizer: AdamW, lr: float | None = None) -> None:
    """One optimizer step over ``params`` using their accumulated ``grad``."""
    if [id(p) for p in params] != [id(p) for p in optimizer.params]:
        raise ValueError("optimizer was built for a different parameter list")
    optimizer.step(lr)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.  The reduction runs in list order so
    results are bit-reproducible.
    """
    params = list(params)
    grads = [p.grad for p in params if p.grad is not None and not p.frozen]
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None and not p.frozen:
                p.grad = p.grad * scale
    return norm


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then constant.

    ``step`` counts from 0, so the first update uses ``base_lr / warmup_steps``.
    """
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)
