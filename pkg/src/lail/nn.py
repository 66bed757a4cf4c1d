"""Parameters, modules, counter-based RNG and the basic layers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class RngState:
    """Counter-based random stream, splittable by name.

    Draws come from a Philox generator keyed by ``(seed, stream)``, so adding
    a new named stream never shifts the draws of an existing one.
    """

    seed: int
    counter: int = 0
    stream: str = ""

    def child(self, name: str) -> "RngState":
        path = f"{self.stream}/{name}" if self.stream else name
        return RngState(self.seed, 0, path)

    def key(self) -> int:
        digest = hashlib.sha256(f"{self.seed & 0xFFFFFFFFFFFFFFFF}:{self.stream}".encode()).digest()
        return int.from_bytes(digest[:16], "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(), counter=self.counter))


class Parameter(Tensor):
    """A named leaf tensor that an optimizer may update."""

    __slots__ = ("name", "_frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self._frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def uniform_fan_in(rng: RngState, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.generator().uniform(-bound, bound, size=shape)


class Module:
    """Container whose attributes may be parameters, modules, or lists/dicts of modules.

    Iteration order follows attribute assignment order, which makes parameter
    names and checkpoint layouts stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield from v.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name], dtype=T.DTYPE)
                if arr.shape != p.shape:
                    raise T.DimensionError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
                p.data = arr.copy()

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngState, bias: bool = True):
        self.weight = Parameter(uniform_fan_in(rng.child("weight"), (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv1d(Module):
    """Same-padded 1-D convolution over ``(..., T, C)`` inputs."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: RngState, stride: int = 1,
                 depthwise: bool = False):
        if depthwise and c_in != c_out:
            raise T.DimensionError("depthwise conv needs c_in == c_out")
        self.stride = stride
        self.depthwise = depthwise
        if depthwise:
            shape, fan_in = (kernel, c_in), kernel
        else:
            shape, fan_in = (kernel, c_in, c_out), kernel * c_in
        self.weight = Parameter(uniform_fan_in(rng.child("weight"), shape, fan_in))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.stride, depthwise=self.depthwise)


def assign_names(module: Module, prefix: str = "") -> None:
    """Write each parameter's dotted path into ``Parameter.name``."""
    for name, p in module.named_parameters(prefix):
        p.name = name


def length_mask(lengths, T_max: int) -> np.ndarray:
    """Boolean ``(B, T_max)`` mask, true on valid frames."""
    lengths = np.asarray(lengths)
    return np.arange(T_max)[None, :] < lengths[:, None]


# -- attention ---------------------------------------------------------------


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def rotary_tables(positions: np.ndarray, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Cos/sin tables ``(len(positions), dim)`` for half-split rotary embeddings."""
    if dim % 2:
        raise T.DimensionError(f"rotary embeddings need an even head dim, got {dim}")
    inv = base ** (-np.arange(0, dim, 2) / dim)
    ang = np.asarray(positions, dtype=T.DTYPE)[..., None] * inv
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    out = x.data * cos + _rotate_half(x.data) * sin
    return Tensor._make(out, (x,), lambda g: (g * cos + _rotate_half_t(g * sin),), "rotary")


def sinusoidal_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    inv = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(pos * inv)
    pe[:, 1::2] = np.cos(pos * inv)[:, : dim // 2]
    return pe


class MultiHeadAttention(Module):
    """Pre-normalised multi-head self-attention.

    Position information only enters the query/key path (rotary rotation or
    an added sinusoidal table); values see the raw input.
    """

    def __init__(self, d: int, num_heads: int, rng: RngState, positional: str = "rotary",
                 causal: bool = False, dropout: float = 0.0):
        if d % num_heads:
            raise T.DimensionError(f"d_model {d} not divisible by num_heads {num_heads}")
        if positional not in ("rotary", "sinusoidal", "none"):
            raise ValueError(f"unknown positional scheme {positional!r}")
        self.norm = LayerNorm(d)
        self.qk = Linear(d, 2 * d, rng.child("qk"))
        self.v = Linear(d, d, rng.child("v"))
        self.out = Linear(d, d, rng.child("out"))
        self.d = d
        self.num_heads = num_heads
        self.positional = positional
        self.causal = causal
        self.dropout = dropout

    def forward(self, x: Tensor, valid: np.ndarray | None = None, rng=None) -> Tensor:
        B, L, d = x.shape
        H, dh = self.num_heads, d // self.num_heads
        h = self.norm(x)
        hq = h + sinusoidal_table(L, d) if self.positional == "sinusoidal" else h
        qk = self.qk(hq).reshape(B, L, 2, H, dh).transpose(2, 0, 3, 1, 4)
        q, k = qk[0], qk[1]
        if self.positional == "rotary":
            cos, sin = rotary_tables(np.arange(L), dh)
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        v = self.v(h).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        allowed = np.ones((B, 1, L, L), dtype=bool)
        if valid is not None:
            allowed &= np.asarray(valid, dtype=bool)[:, None, None, :]
        if self.causal:
            allowed &= np.tril(np.ones((L, L), dtype=bool))
        if not allowed.all():
            scores = scores + np.where(allowed, 0.0, -np.inf)
        att = T.softmax(scores, axis=-1)
        att = T.dropout(att, self.dropout, rng)
        ctx = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return self.out(ctx)


class FeedForward(Module):
    """LayerNorm -> Linear -> swish -> Linear."""

    def __init__(self, d: int, hidden: int, rng: RngState, dropout: float = 0.0):
        self.norm = LayerNorm(d)
        self.w1 = Linear(d, hidden, rng.child("w1"))
        self.w2 = Linear(hidden, d, rng.child("w2"))
        self.dropout = dropout

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = T.swish(self.w1(self.norm(x)))
        return self.w2(T.dropout(h, self.dropout, rng))
