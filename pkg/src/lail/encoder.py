"""Feature frontend and Conformer / Transformer encoder stack.

Every layer's output is retained so auxiliary heads can tap any depth.
Inputs are batched ``(B, T, d)`` with per-utterance valid lengths; padded
frames are masked as attention keys and zeroed before every convolution,
so a batched forward matches the per-utterance forward frame for frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import (Conv1d, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, RngState,
                 assign_names, length_mask)
from .tensor import ContractError, Tensor


class ConfigurationError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 8
    d_model: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    conv_kernel: int = 9
    positional_scheme: str = "rotary"
    layer_kind: str = "conformer"
    d_feat: int = 16
    frontend_stride: int = 2
    frontend_kernel: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.positional_scheme not in ("rotary", "sinusoidal"):
            raise ConfigurationError(f"positional_scheme must be rotary or sinusoidal, got {self.positional_scheme!r}")
        if self.layer_kind not in ("conformer", "transformer"):
            raise ConfigurationError(f"layer_kind must be conformer or transformer, got {self.layer_kind!r}")


def _zero_padding(x: Tensor, valid: np.ndarray | None) -> Tensor:
    if valid is None or valid.all():
        return x
    return T.mul(x, valid[..., None].astype(T.DTYPE))


class ConvModule(Module):
    """LayerNorm -> pointwise (2d) -> GLU -> depthwise conv -> LayerNorm -> swish -> pointwise."""

    def __init__(self, d: int, kernel: int, rng: RngState, dropout: float = 0.0):
        self.norm = LayerNorm(d)
        self.pw1 = Linear(d, 2 * d, rng.child("pw1"))
        self.dw = Conv1d(d, d, kernel, rng.child("dw"), depthwise=True)
        self.dw_norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng.child("pw2"))
        self.dropout = dropout

    def forward(self, x: Tensor, valid=None, rng=None) -> Tensor:
        h = T.glu(self.pw1(self.norm(x)))
        h = self.dw(_zero_padding(h, valid))
        h = T.swish(self.dw_norm(h))
        return T.dropout(self.pw2(h), self.dropout, rng)


class ConformerLayer(Module):
    """Macaron Conformer block.

    ::

        x = x + 1/2 FFN(x)
        x = x + MHSA(x)
        x = x + Conv(x)
        x = LayerNorm(x + 1/2 FFN(x))
    """

    def __init__(self, cfg: EncoderConfig, rng: RngState):
        d = cfg.d_model
        self.ffn1 = FeedForward(d, cfg.ffn_dim, rng.child("ffn1"), cfg.dropout)
        self.mhsa = MultiHeadAttention(d, cfg.num_heads, rng.child("mhsa"), cfg.positional_scheme,
                                       dropout=cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, rng.child("conv"), cfg.dropout)
        self.ffn2 = FeedForward(d, cfg.ffn_dim, rng.child("ffn2"), cfg.dropout)
        self.final_norm = LayerNorm(d)

    def forward(self, x: Tensor, valid=None, rng=None) -> Tensor:
        x = x + 0.5 * self.ffn1(x)
        x = x + self.mhsa(x, valid)
        x = x + self.conv(x, valid)
        return self.final_norm(x + 0.5 * self.ffn2(x))


class TransformerLayer(Module):
    """Pre-norm Transformer block: ``x + MHSA(x)`` then ``x + FFN(x)``."""

    def __init__(self, cfg: EncoderConfig, rng: RngState):
        d = cfg.d_model
        self.mhsa = MultiHeadAttention(d, cfg.num_heads, rng.child("mhsa"), cfg.positional_scheme,
                                       dropout=cfg.dropout)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng.child("ffn"), cfg.dropout)

    def forward(self, x: Tensor, valid=None, rng=None) -> Tensor:
        x = x + self.mhsa(x, valid)
        return x + self.ffn(x)


class FeatureFrontend(Module):
    """Strided linear convolution from acoustic features to ``d_model``.

    Output length is ``ceil(T0 / stride)``.
    """

    def __init__(self, cfg: EncoderConfig, rng: RngState):
        self.conv = Conv1d(cfg.d_feat, cfg.d_model, cfg.frontend_kernel, rng.child("conv"),
                           stride=cfg.frontend_stride)
        self.stride = cfg.frontend_stride

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def output_lengths(self, lengths) -> np.ndarray:
        return -(-np.asarray(lengths) // self.stride)

    def forward(self, feats: Tensor, valid=None) -> Tensor:
        if feats.shape[-2] == 0:
            raise ContractError("frontend got an empty feature sequence")
        return self.conv(_zero_padding(feats, valid))


@dataclass
class EncoderOutput:
    hidden: dict[int, Tensor]
    final: Tensor
    lengths: np.ndarray
    valid: np.ndarray = field(repr=False)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: RngState):
        self.cfg = cfg
        self.frontend = FeatureFrontend(cfg, rng.child("frontend"))
        layer_cls = ConformerLayer if cfg.layer_kind == "conformer" else TransformerLayer
        self.layers = [layer_cls(cfg, rng.child(f"layers.{i}")) for i in range(cfg.num_layers)]
        assign_names(self, "encoder.")

    def check_taps(self, taps) -> list[int]:
        taps = sorted(set(int(t) for t in taps))
        bad = [t for t in taps if not 1 <= t <= self.cfg.num_layers]
        if bad:
            raise ConfigurationError(f"tap layers {bad} outside 1..{self.cfg.num_layers}")
        return taps

    def forward(self, feats, lengths=None, taps=()) -> EncoderOutput:
        """Run the stack; ``hidden[l]`` is layer ``l``'s output (1-based).

        ``feats`` may be ``(T0, d_feat)`` for one utterance or
        ``(B, T0, d_feat)`` with ``lengths``.
        """
        taps = self.check_taps(taps)
        feats = T._wrap(feats)
        if feats.ndim == 2:
            feats = feats.reshape(1, *feats.shape)
        B, T0, _ = feats.shape
        lengths = np.full(B, T0) if lengths is None else np.asarray(lengths)
        if T0 == 0 or (lengths < 1).any():
            raise ContractError("encoder input has an empty utterance")
        in_valid = length_mask(lengths, T0)
        x = self.frontend(feats, in_valid)
        out_len = self.frontend.output_lengths(lengths)
        valid = length_mask(out_len, x.shape[1])
        hidden = {}
        for i, layer in enumerate(self.layers, start=1):
            x = layer(x, valid)
            if i in taps:
                hidden[i] = x
        return EncoderOutput(hidden, x, out_len, valid)

    def run_layers(self, x: Tensor, start: int, valid=None) -> Tensor:
        """Apply layers ``start+1 .. num_layers`` to a layer-``start`` output."""
        for layer in self.layers[start:]:
            x = layer(x, valid)
        return x
