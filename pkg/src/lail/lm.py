"""Character tokenizer and a small causal transformer language model.

The LM accepts an optional prefix of already-embedded rows (projected audio)
between BOS and the text.  Input layout for one utterance::

    [BOS, z_1 .. z_P, y_1 .. y_{N-1}]

and the logits for ``y_t`` are read at the position just before it, so each
prediction sees BOS, the whole prefix and ``y_{<t}``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import (FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, RngState,
                 assign_names, uniform_fan_in)
from .optim import AdamW, clip_grad_norm, warmup_lr
from .tensor import ContractError, NumericError, Tensor

log = logging.getLogger(__name__)


class Tokenizer:
    """Characters get ids ``1..V``; 0 is PAD (and the CTC blank), then BOS, EOS."""

    PAD = 0

    def __init__(self, alphabet: str):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet has duplicate characters")
        self.alphabet = alphabet
        self._ids = {c: i + 1 for i, c in enumerate(alphabet)}
        self.BOS = len(alphabet) + 1
        self.EOS = len(alphabet) + 2

    @property
    def num_chars(self) -> int:
        return len(self.alphabet)

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 3

    def tokenize(self, text: str) -> list[int]:
        bad = sorted({c for c in text if c not in self._ids})
        if bad:
            raise ValueError(f"characters outside the alphabet: {bad!r}")
        return [self._ids[c] for c in text]

    def detokenize(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 1 <= i <= len(self.alphabet):
                raise ValueError(f"id {i} is not a character id")
            out.append(self.alphabet[i - 1])
        return "".join(out)


@dataclass
class CausalLMConfig:
    d_llm: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_mult: int = 2
    context_cap: int = 160

    def __post_init__(self):
        if self.d_llm % self.num_heads or (self.d_llm // self.num_heads) % 2:
            raise ValueError(f"d_llm={self.d_llm} must split into {self.num_heads} heads of even width")


LM_TIERS = {
    "small": CausalLMConfig(d_llm=32, num_layers=2, num_heads=2),
    "medium": CausalLMConfig(d_llm=64, num_layers=3, num_heads=4),
    "large": CausalLMConfig(d_llm=128, num_layers=4, num_heads=4),
}


class DecoderBlock(Module):
    def __init__(self, cfg: CausalLMConfig, rng: RngState):
        self.attn = MultiHeadAttention(cfg.d_llm, cfg.num_heads, rng.child("attn"), "rotary", causal=True)
        self.ffn = FeedForward(cfg.d_llm, cfg.ffn_mult * cfg.d_llm, rng.child("ffn"))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(x)
        return x + self.ffn(x)


class CausalLM(Module):
    def __init__(self, cfg: CausalLMConfig, vocab_size: int, rng: RngState):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = Parameter(uniform_fan_in(rng.child("embed"), (vocab_size, cfg.d_llm), cfg.d_llm))
        self.blocks = [DecoderBlock(cfg, rng.child(f"blocks.{i}")) for i in range(cfg.num_layers)]
        self.norm = LayerNorm(cfg.d_llm)
        self.head = Linear(cfg.d_llm, vocab_size, rng.child("head"))
        assign_names(self, "lm.")

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    @property
    def bos(self) -> int:
        return self.vocab_size - 2

    def hidden_at(self, prefix: Tensor | None, prefix_lens, token_seqs: Sequence[Sequence[int]]):
        """Final-norm hidden states at every prediction position.

        Returns ``(h, owner, targets)``: ``h`` is ``(M, d_llm)`` with one row
        per target token across the batch, ``owner[m]`` the utterance index
        and ``targets[m]`` the token to predict.
        """
        B = len(token_seqs)
        d = self.cfg.d_llm
        if prefix is None:
            P = np.zeros(B, dtype=np.int64)
            Pmax = 0
        else:
            if prefix.ndim == 2:
                prefix = prefix.reshape(1, *prefix.shape)
            Pmax = prefix.shape[1]
            P = np.full(B, Pmax) if prefix_lens is None else np.asarray(prefix_lens, dtype=np.int64)
            if prefix.shape[-1] != d:
                raise T.DimensionError(f"prefix width {prefix.shape[-1]} != d_llm {d}")
        N = np.array([len(s) for s in token_seqs], dtype=np.int64)
        if (P + N > self.cfg.context_cap).any():
            raise ContractError(f"prefix+text length {int((P + N).max())} exceeds context cap {self.cfg.context_cap}")
        S = int((P + np.maximum(N, 1)).max())

        # source rows: [zero, BOS, prefix rows..., token embeddings...]
        flat_tokens = np.concatenate([np.asarray(s[:-1], dtype=np.int64) for s in token_seqs] + [np.zeros(0, np.int64)])
        pieces = [Tensor(np.zeros((1, d))), T.take_rows(self.embed, np.array([self.bos]))]
        if Pmax:
            pieces.append(prefix.reshape(B * Pmax, d))
        tok_base = 2 + B * Pmax
        if flat_tokens.size:
            pieces.append(T.take_rows(self.embed, flat_tokens))
        src = T.concat(pieces, axis=0)

        index = np.zeros((B, S), dtype=np.int64)
        pos_rows, owner, targets = [], [], []
        tok_off = 0
        for b in range(B):
            index[b, 0] = 1
            index[b, 1:1 + P[b]] = 2 + b * Pmax + np.arange(P[b])
            nt = max(int(N[b]) - 1, 0)
            index[b, 1 + P[b]:1 + P[b] + nt] = tok_base + tok_off + np.arange(nt)
            tok_off += nt
            pos_rows.extend(b * S + P[b] + np.arange(N[b]))
            owner.extend([b] * int(N[b]))
            targets.extend(token_seqs[b])
        x = T.take_rows(src, index)
        for blk in self.blocks:
            x = blk(x)
        h = T.take_rows(x.reshape(B * S, d), np.array(pos_rows, dtype=np.int64))
        return self.norm(h), np.array(owner, dtype=np.int64), np.array(targets, dtype=np.int64)

    def forward(self, prefix: Tensor | None, tokens: Sequence[int]) -> Tensor:
        """Logits ``(N, vocab)`` for one utterance; row ``t`` predicts ``tokens[t]``."""
        h, _, _ = self.hidden_at(prefix, None, [list(tokens)])
        return self.head(h)

    def token_nll(self, prefix: Tensor | None, prefix_lens, token_seqs) -> tuple[Tensor, np.ndarray]:
        """Per-token negative log-likelihoods ``(M,)`` and their owners."""
        h, owner, targets = self.hidden_at(prefix, prefix_lens, token_seqs)
        logp = T.log_softmax(self.head(h))
        picked = logp[np.arange(len(targets)), targets]
        return -picked, owner


lm_forward = CausalLM.forward


def clm_loss_batch(lm: CausalLM, prefix: Tensor | None, prefix_lens, transcripts) -> Tensor:
    """Per-utterance summed causal-LM losses ``(B,)``."""
    if any(len(t) == 0 for t in transcripts):
        raise ContractError("causal LM loss needs a non-empty transcript")
    nll, owner = lm.token_nll(prefix, prefix_lens, transcripts)
    assign = np.zeros((len(transcripts), len(owner)))
    assign[owner, np.arange(len(owner))] = 1.0
    return T.matmul(Tensor(assign), nll.reshape(-1, 1)).reshape(len(transcripts))


def clm_loss(lm: CausalLM, prefix: Tensor | None, transcript: Sequence[int]) -> Tensor:
    """``-sum_t log P(y_t | y_<t, prefix)`` summed over the transcript tokens only."""
    return clm_loss_batch(lm, prefix, None, [list(transcript)]).sum()


def perplexity(lm: CausalLM, sentences: Sequence[Sequence[int]], batch_size: int = 64) -> float:
    """``exp`` of the mean per-token NLL (no prefix)."""
    total, count = 0.0, 0
    for i in range(0, len(sentences), batch_size):
        chunk = [list(s) for s in sentences[i:i + batch_size] if len(s)]
        if not chunk:
            continue
        nll, _ = lm.token_nll(None, None, chunk)
        total += float(nll.data.sum())
        count += nll.shape[0]
    return math.exp(total / count)


def unigram_perplexity(train: Sequence[Sequence[int]], heldout: Sequence[Sequence[int]], vocab: int) -> float:
    """Add-one unigram baseline for comparison with :func:`perplexity`."""
    counts = np.ones(vocab)
    for s in train:
        np.add.at(counts, np.asarray(s, dtype=np.int64), 1.0)
    logp = np.log(counts / counts.sum())
    toks = np.concatenate([np.asarray(s, dtype=np.int64) for s in heldout])
    return float(np.exp(-logp[toks].mean()))


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    clip: float = 1.0
    log_every: int = 50


def lm_pretrain(sentences: Sequence[Sequence[int]], cfg: CausalLMConfig, vocab_size: int, rng: RngState,
                train: PretrainConfig | None = None, curve: list | None = None) -> CausalLM:
    """Next-token training on token sequences, then freeze.

    ``curve`` (if given) receives ``(step, mean token NLL)`` records.
    """
    train = train or PretrainConfig()
    if not sentences:
        raise ValueError("empty LM corpus")
    lm = CausalLM(cfg, vocab_size, rng.child("lm"))
    opt = AdamW(lm.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    order_rng = rng.child("lm_batches").generator()
    data = [list(s) for s in sentences if len(s)]
    perm = order_rng.permutation(len(data))
    pos = 0
    for step in range(train.steps):
        if pos + train.batch_size > len(perm):
            perm = order_rng.permutation(len(data))
            pos = 0
        batch = [data[i] for i in perm[pos:pos + train.batch_size]]
        pos += train.batch_size
        opt.zero_grad()
        nll, _ = lm.token_nll(None, None, batch)
        loss = nll.mean()
        if not math.isfinite(loss.item()):
            raise NumericError(f"LM pretraining diverged at step {step}: loss={loss.item()}")
        loss.backward()
        clip_grad_norm(opt.params, train.clip)
        opt.step(warmup_lr(step, train.lr, train.warmup_steps))
        if curve is not None and (step % train.log_every == 0 or step == train.steps - 1):
            curve.append((step, loss.item()))
        if step % train.log_every == 0:
            log.debug("lm step %d nll %.4f", step, loss.item())
    lm.freeze()
    return lm


class LMScorer:
    """Adapter exposing ``log P(token | BOS + prefix)`` for shallow fusion."""

    def __init__(self, lm: CausalLM):
        self.lm = lm
        self._cache: dict[tuple, np.ndarray] = {}

    def __call__(self, prefix: tuple, token: int) -> float:
        row = self._cache.get(prefix)
        if row is None:
            h, _, _ = self.lm.hidden_at(None, None, [list(prefix) + [0]])
            row = T.log_softmax(self.lm.head(h)).data[-1]
            self._cache[prefix] = row
        return float(row[token])
