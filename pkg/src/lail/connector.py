"""Connector stacks and the language-aware intermediate loss.

A connector maps a tapped encoder state ``h_l`` of shape ``(T, d_model)``
to ``ceil(T / 2**k)`` rows in the LM embedding space: ``k`` strided
convolution blocks (stride 2, swish) followed by a linear projection.  The
frozen LM then scores the transcript conditioned on those rows, and the
per-layer losses are combined as ``lail = sum_l lambda_l * clm_l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import ConfigurationError
from .lm import CausalLM, clm_loss_batch
from .nn import Conv1d, Linear, Module, RngState, length_mask
from .tensor import Tensor


class ConnectorStack(Module):
    def __init__(self, d_model: int, d_llm: int, k: int, rng: RngState, owner_layer: int = 0,
                 kernel: int = 3):
        if not 0 <= k <= 5:
            raise ConfigurationError(f"down-sampling depth must be in 0..5, got {k}")
        self.blocks = [Conv1d(d_model, d_model, kernel, rng.child(f"blocks.{i}"), stride=2) for i in range(k)]
        self.proj = Linear(d_model, d_llm, rng.child("proj"))
        self.owner_layer = owner_layer

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def output_lengths(self, lengths) -> np.ndarray:
        return -(-np.asarray(lengths) // (2 ** self.depth))

    def forward(self, h, lengths=None) -> tuple[Tensor, np.ndarray]:
        h = T._wrap(h)
        squeeze = h.ndim == 2
        if squeeze:
            h = h.reshape(1, *h.shape)
        if h.shape[1] == 0:
            raise T.ContractError("connector got an empty sequence")
        lengths = np.full(h.shape[0], h.shape[1]) if lengths is None else np.asarray(lengths)
        x = h
        for blk in self.blocks:
            valid = length_mask(lengths, x.shape[1])
            if not valid.all():
                x = T.mul(x, valid[..., None].astype(T.DTYPE))
            x = T.swish(blk(x))
            lengths = -(-lengths // 2)
        z = self.proj(x)
        return (z.reshape(*z.shape[1:]) if squeeze else z), lengths


def connector_forward(stack: ConnectorStack, h_l, lengths=None):
    return stack(h_l, lengths)


@dataclass
class LAILConfig:
    tap_layers: tuple[int, ...] = (2, 4, 6, 8)
    lambdas: dict[int, float] | None = None
    alpha: float = 0.3
    k: int = 2

    def __post_init__(self):
        self.tap_layers = tuple(sorted(set(int(l) for l in self.tap_layers)))
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.lambdas is not None:
            self.lambdas = {int(l): float(v) for l, v in self.lambdas.items()}

    def weights(self) -> dict[int, float]:
        """Per-layer weights; uniform ``1/|L|`` unless given explicitly."""
        if self.lambdas is not None:
            if set(self.lambdas) != set(self.tap_layers):
                raise ConfigurationError(f"lambda keys {sorted(self.lambdas)} != tap layers {list(self.tap_layers)}")
            return {l: self.lambdas[l] for l in self.tap_layers}
        n = len(self.tap_layers)
        return {l: 1.0 / n for l in self.tap_layers}


@dataclass
class LAILResult:
    total: Tensor
    ctc: Tensor
    lail: Tensor | None
    per_layer: dict[int, Tensor] = field(default_factory=dict)
    tokens: int = 0


def build_connectors(d_model: int, d_llm: int, cfg: LAILConfig, rng: RngState) -> dict[str, ConnectorStack]:
    """One independently initialised stack per tap layer."""
    return {str(l): ConnectorStack(d_model, d_llm, cfg.k, rng.child(f"connectors.{l}"), owner_layer=l)
            for l in cfg.tap_layers}


def lail_loss(cfg: LAILConfig, taps: Mapping[int, Tensor], stacks: Mapping, lm: CausalLM,
              transcripts: Sequence[Sequence[int]], lengths=None) -> tuple[Tensor, dict[int, Tensor]]:
    """``(lail, per_layer)``; each entry is the batch mean of per-utterance summed CLM losses.

    The weighted sum runs in ascending layer order.
    """
    weights = cfg.weights()
    if sorted(taps) != list(cfg.tap_layers):
        raise ConfigurationError(f"tapped layers {sorted(taps)} != configured {list(cfg.tap_layers)}")
    per_layer: dict[int, Tensor] = {}
    lail = None
    for l in cfg.tap_layers:
        stack = stacks.get(str(l), stacks.get(l)) if hasattr(stacks, "get") else None
        if stack is None:
            raise ConfigurationError(f"no connector stack for tap layer {l}")
        h = taps[l]
        z, zlen = stack(h, lengths)
        if z.ndim == 2:
            z = z.reshape(1, *z.shape)
        per_utt = clm_loss_batch(lm, z, zlen, transcripts)
        per_layer[l] = per_utt.mean()
        term = per_layer[l] * weights[l]
        lail = term if lail is None else lail + term
    return lail, per_layer


def total_loss(ctc, lail, alpha: float):
    """``ctc + alpha * lail``; with ``alpha == 0`` the result is ``ctc`` itself."""
    if alpha == 0:
        return ctc
    return ctc + alpha * lail
