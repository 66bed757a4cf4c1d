"""Reverse-mode automatic differentiation over dense fp64 arrays.

A :class:`Tensor` wraps a ``numpy.ndarray`` and records the operation that
produced it.  Calling :meth:`Tensor.backward` on a scalar walks the graph in
reverse topological order and accumulates gradients into every leaf that
requires them.  Intermediate gradients are transient, so running backward
twice on the same graph adds each leaf gradient exactly twice.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on NaN inputs or gradients."""


class ContractError(ValueError):
    """Raised when a documented precondition is violated."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == DTYPE:
        return x
    return np.asarray(x, dtype=DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = ""

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- backward -----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.data, b.data)

    def vjp(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.data, b.data)

    def vjp(g):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.data, b.data)

    def vjp(g):
        return (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a.data, b.data)
    out = a.data / b.data

    def vjp(g):
        return (
            unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), vjp, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return Tensor._make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "swish")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_UNARY = {"swish": swish, "sigmoid": sigmoid, "exp": exp, "log": log, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "mul": mul, "sub": sub, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a named elementwise op (``add``, ``mul``, ``swish``, ``sigmoid``...)."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](_wrap(a))
    raise ContractError(f"unknown elementwise op {op!r}")


def glu(x: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: first half * sigmoid(second half)."""
    n = x.shape[axis]
    if n % 2:
        raise DimensionError(f"glu needs an even size along axis {axis}, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid(b)

    def vjp(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return Tensor._make(a * s, (x,), vjp, "glu")


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep ``x`` where ``mask`` is true, constant ``fill`` elsewhere."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.data, fill)
    return Tensor._make(out, (x,), lambda g: (np.where(mask, g, 0.0),), "where")


# -- reductions and shape ops ----------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def vjp(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return Tensor._make(np.array(out), (x,), vjp, "getitem")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor: ``out[...] = x[index[...]]``."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[index]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, x.shape[-1]))
        return (full,)

    return Tensor._make(out, (x,), vjp, "take_rows")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_wrap(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, xs, vjp, "concat")


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), vjp, "matmul")


def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"NaN input to {what}")


def softmax_row(x: Tensor, log: bool = False, axis: int = -1) -> Tensor:
    """Softmax (or log-softmax) along ``axis`` with max subtraction."""
    _check_finite(x.data, "softmax")
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    z = x.data - m
    if log:
        lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
        out = z - lse
        p = np.exp(out)

        def vjp(g):
            return (g - p * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(out, (x,), vjp, "log_softmax")
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), vjp, "softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return softmax_row(x, log=False, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return softmax_row(x, log=True, axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``, ``beta``."""
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gbeta = unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), vjp, "layer_norm")


def conv_out_length(T: int, stride: int) -> int:
    return -(-T // stride)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           depthwise: bool = False) -> Tensor:
    """1-D cross-correlation over time with "same" zero padding.

    ``x`` is ``(..., T, C_in)``.  A full kernel is ``(K, C_in, C_out)``; a
    depthwise kernel is ``(K, C)``.  Output frame ``i`` is centred on input
    frame ``i * stride``::

        out[i] = sum_k x[i*stride + k - (K-1)//2] @ kernel[k] + bias

    so the output length is ``ceil(T / stride)``.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    T = x.shape[-2]
    if T == 0:
        raise ContractError("conv1d on an empty sequence")
    K = kernel.shape[0]
    if depthwise:
        if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
            raise DimensionError(f"depthwise kernel {kernel.shape} does not match input {x.shape}")
    elif kernel.ndim != 3 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"conv kernel {kernel.shape} does not match input {x.shape}")
    left = (K - 1) // 2
    To = conv_out_length(T, stride)
    span = stride * (To - 1) + 1
    need = span + K - 1
    pad = [(0, 0)] * (x.ndim - 2) + [(left, max(need - T - left, 0)), (0, 0)]
    xp = np.pad(x.data, pad)
    # windows[..., i, k, c] = xp[..., i*stride + k, c]
    windows = np.stack([xp[..., k:k + span:stride, :] for k in range(K)], axis=-2)
    if depthwise:
        out = np.einsum("...tkc,kc->...tc", windows, kernel.data)
    else:
        cin, cout = kernel.shape[1], kernel.shape[2]
        out = windows.reshape(windows.shape[:-2] + (K * cin,)) @ kernel.data.reshape(K * cin, cout)
    parents = [x, kernel]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def vjp(g):
        gx = gk = gb = None
        if x.requires_grad:
            if depthwise:
                gw = g[..., None, :] * kernel.data
            else:
                gw = (g @ kernel.data.reshape(K * kernel.shape[1], -1).T).reshape(g.shape[:-1] + (K, kernel.shape[1]))
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + span:stride, :] += gw[..., k, :]
            gx = gxp[..., left:left + T, :]
        if kernel.requires_grad:
            if depthwise:
                gk = np.einsum("nkc,nc->kc", windows.reshape(-1, K, windows.shape[-1]),
                               g.reshape(-1, g.shape[-1]))
            else:
                flat = windows.reshape(-1, K * kernel.shape[1])
                gk = (flat.T @ g.reshape(-1, g.shape[-1])).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = unbroadcast(g, bias.shape)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return Tensor._make(out, parents, vjp, "conv1d")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
