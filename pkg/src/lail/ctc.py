"""Connectionist temporal classification: loss, oracle and decoders.

The blank symbol is always index 0; labels are ``1..V``.  A lattice is a
``(T, V+1)`` array of per-frame log-probabilities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .tensor import ContractError, Tensor

BLANK = 0
NEG_INF = -np.inf


@dataclass
class CTCResult:
    loss: float
    grad_logp: np.ndarray


def collapse(alignment: Sequence[int]) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for a in alignment:
        a = int(a)
        if a != prev and a != BLANK:
            out.append(a)
        prev = a
    return out


def _check_target(target: Sequence[int], n_classes: int) -> np.ndarray:
    y = np.asarray(target, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 1 or y.max() >= n_classes):
        raise ContractError(f"target tokens must lie in 1..{n_classes - 1}, got {y.tolist()}")
    return y


def _extend(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved labels and the mask of states allowing a skip from s-2."""
    S = 2 * len(y) + 1
    ext = np.zeros(S, dtype=np.int64)
    ext[1::2] = y
    skip = np.zeros(S, dtype=bool)
    if len(y) > 1:
        skip[3::2] = y[1:] != y[:-1]
    return ext, skip


def _lse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = np.maximum(a, b)
    fin = np.isfinite(m)
    out = np.full_like(m, NEG_INF)
    out[fin] = m[fin] + np.log(np.exp(a[fin] - m[fin]) + np.exp(b[fin] - m[fin]))
    return out


def forward_backward(logp: np.ndarray, target: Sequence[int]) -> tuple[np.ndarray, np.ndarray, float]:
    """Log-space CTC trellis.

    Returns ``(alpha, beta, log_p)``.  ``alpha[t, s]`` includes the emission
    at frame ``t``; ``beta[t, s]`` covers frames ``t+1..T-1`` only, so
    ``logsumexp(alpha[t] + beta[t]) == log_p`` for every ``t``.
    """
    logp = np.asarray(logp, dtype=np.float64)
    Tn, C = logp.shape
    y = _check_target(target, C)
    ext, skip = _extend(y)
    S = len(ext)
    emit = logp[:, ext]
    alpha = np.full((Tn, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, Tn):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lse(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], _lse(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    beta = np.full((Tn, S), NEG_INF)
    beta[Tn - 1, S - 1] = 0.0
    if S > 1:
        beta[Tn - 1, S - 2] = 0.0
    for t in range(Tn - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lse(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], _lse(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    ends = alpha[Tn - 1, S - 1:] if S == 1 else alpha[Tn - 1, S - 2:]
    log_p = float(logsumexp(ends)) if np.isfinite(ends).any() else NEG_INF
    return alpha, beta, log_p


def ctc_loss(logp, target: Sequence[int]) -> CTCResult:
    """Negative log-likelihood ``-log P(target | lattice)`` and its gradient.

    ``grad_logp[t, k] = -P(frame t emits k | target)``, the derivative with
    respect to the lattice entries treated as free variables.  Infeasible
    targets give ``loss = inf`` and an all-zero gradient.
    """
    logp = np.asarray(getattr(logp, "data", logp), dtype=np.float64)
    if logp.ndim != 2 or logp.shape[0] < 1:
        raise ContractError(f"lattice must be (T>=1, V+1), got {logp.shape}")
    y = _check_target(target, logp.shape[1])
    if logp.shape[0] < len(y) + int(np.sum(y[1:] == y[:-1])):
        return CTCResult(math.inf, np.zeros_like(logp))
    alpha, beta, log_p = forward_backward(logp, y)
    if not np.isfinite(log_p):
        return CTCResult(math.inf, np.zeros_like(logp))
    ext, _ = _extend(y)
    occ = np.exp(alpha + beta - log_p)
    grad = np.zeros_like(logp)
    for s, k in enumerate(ext):
        grad[:, k] -= occ[:, s]
    return CTCResult(-log_p, grad)


def ctc_loss_batch(logp: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
    """Differentiable per-utterance CTC losses for a padded ``(B, T, V+1)`` batch.

    Returns ``(losses, feasible)`` where infeasible utterances contribute a
    zero loss and zero gradient and are flagged false in ``feasible``.
    """
    B = logp.shape[0]
    losses = np.zeros(B)
    grads = np.zeros_like(logp.data)
    feasible = np.ones(B, dtype=bool)
    for b in range(B):
        n = int(lengths[b])
        res = ctc_loss(logp.data[b, :n], targets[b])
        if math.isinf(res.loss):
            feasible[b] = False
            continue
        losses[b] = res.loss
        grads[b, :n] = res.grad_logp

    def vjp(g):
        return (grads * g[:, None, None],)

    return Tensor._make(losses, (logp,), vjp, "ctc"), feasible


# -- brute force oracle --------------------------------------------------------


class OracleRefused(RuntimeError):
    pass


@lru_cache(maxsize=64)
def _all_alignments(n_classes: int, Tn: int) -> tuple[np.ndarray, tuple]:
    grid = np.array(list(itertools.product(range(n_classes), repeat=Tn)), dtype=np.int64)
    keys = tuple(tuple(collapse(row)) for row in grid)
    return grid, keys


def ctc_brute_force(logp, target: Sequence[int], guard: int = 10 ** 7) -> float:
    """``log P(target)`` by summing over every length-T alignment.

    Returns ``-inf`` for impossible targets.  Refuses when ``(V+1)^T`` exceeds
    ``guard``.
    """
    logp = np.asarray(getattr(logp, "data", logp), dtype=np.float64)
    Tn, C = logp.shape
    if C ** Tn > guard:
        raise OracleRefused(f"{C}^{Tn} alignments exceeds the enumeration guard {guard}")
    y = tuple(int(v) for v in target)
    grid, keys = _all_alignments(C, Tn)
    match = np.fromiter((k == y for k in keys), dtype=bool, count=len(keys))
    if not match.any():
        return NEG_INF
    scores = logp[np.arange(Tn)[None, :], grid[match]].sum(axis=1)
    return float(logsumexp(scores))


def label_posteriors(logp, max_len: int | None = None) -> dict[tuple, float]:
    """Exact ``log P(y)`` for every label sequence ``y`` reachable in the lattice (tiny inputs only)."""
    logp = np.asarray(getattr(logp, "data", logp), dtype=np.float64)
    Tn, C = logp.shape
    grid, keys = _all_alignments(C, Tn)
    scores = logp[np.arange(Tn)[None, :], grid].sum(axis=1)
    buckets: dict[tuple, list[float]] = {}
    for k, s in zip(keys, scores):
        buckets.setdefault(k, []).append(s)
    return {k: float(logsumexp(v)) for k, v in buckets.items()}


# -- decoding ------------------------------------------------------------------


def greedy_decode(logp) -> list[int]:
    """Per-frame argmax then collapse.  Ties go to the lowest index."""
    logp = np.asarray(getattr(logp, "data", logp))
    return collapse(np.argmax(logp, axis=-1))


LMScorer = Callable[[tuple, int], float]


def prefix_beam_search(logp, beam: int = 8, lm: LMScorer | None = None, lm_weight: float = 0.0) -> list[int]:
    """CTC prefix beam search with optional shallow fusion.

    Each hypothesis tracks ``(log P_blank, log P_nonblank)``.  When fusion is
    on, ``lm_weight * lm(prefix, token)`` is added once per emitted token.
    Ranking uses the fused total; equal scores go to the lexicographically
    smaller label sequence.
    """
    if beam < 1:
        raise ContractError("beam must be >= 1")
    if lm_weight < 0:
        raise ContractError("lm_weight must be >= 0")
    logp = np.asarray(getattr(logp, "data", logp), dtype=np.float64)
    Tn, C = logp.shape
    use_lm = lm is not None and lm_weight > 0
    lm_cache: dict[tuple, float] = {}

    def lm_bonus(prefix: tuple, tok: int) -> float:
        if not use_lm:
            return 0.0
        key = prefix + (tok,)
        if key not in lm_cache:
            s = lm(prefix, tok)
            lm_cache[key] = -math.inf if s == -math.inf else lm_weight * s
        return lm_cache[key]

    def lse(a: float, b: float) -> float:
        if a == -math.inf:
            return b
        if b == -math.inf:
            return a
        m = max(a, b)
        return m + math.log(math.exp(a - m) + math.exp(b - m))

    # prefix -> [p_blank, p_nonblank, lm_total]
    beams: dict[tuple, list[float]] = {(): [0.0, -math.inf, 0.0]}
    for t in range(Tn):
        row = logp[t]
        nxt: dict[tuple, list[float]] = {}

        def entry(prefix, lm_total):
            e = nxt.get(prefix)
            if e is None:
                e = nxt[prefix] = [-math.inf, -math.inf, lm_total]
            return e

        for prefix, (pb, pnb, lmt) in beams.items():
            total = lse(pb, pnb)
            e = entry(prefix, lmt)
            e[0] = lse(e[0], total + row[BLANK])
            if prefix:
                last = prefix[-1]
                e[1] = lse(e[1], pnb + row[last])
            for k in range(1, C):
                if row[k] == -math.inf:
                    continue
                bonus = lm_bonus(prefix, k)
                if bonus == -math.inf:
                    continue
                new = prefix + (k,)
                e2 = entry(new, lmt + bonus)
                if prefix and k == prefix[-1]:
                    e2[1] = lse(e2[1], pb + row[k])
                else:
                    e2[1] = lse(e2[1], total + row[k])
        ranked = sorted(nxt.items(), key=lambda kv: (-(lse(kv[1][0], kv[1][1]) + kv[1][2]), kv[0]))
        beams = dict(ranked[:beam])
    best = min(beams.items(), key=lambda kv: (-(lse(kv[1][0], kv[1][1]) + kv[1][2]), kv[0]))
    return list(best[0])
