import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import log_softmax

from lail.gradcheck import gradcheck
from lail.lm import (LM_TIERS, CausalLM, CausalLMConfig, PretrainConfig, Tokenizer, clm_loss, clm_loss_batch,
                     lm_pretrain, perplexity, unigram_perplexity)
from lail.nn import Parameter, RngState
from lail.tensor import ContractError, Tensor

ALPHABET = " abcdefghiklmnoprstuwxy"
TINY = CausalLMConfig(d_llm=8, num_layers=2, num_heads=2, ffn_mult=2, context_cap=40)


@pytest.fixture(scope="module")
def tok():
    return Tokenizer(ALPHABET)


@pytest.fixture(scope="module")
def lm(tok):
    return CausalLM(TINY, tok.vocab_size, RngState(3))


class TestTokenizer:
    def test_empty(self, tok):
        assert tok.tokenize("") == []

    def test_ids(self, tok):
        assert tok.tokenize("ab") == [ALPHABET.index("a") + 1, ALPHABET.index("b") + 1]

    def test_specials_disjoint(self, tok):
        chars = set(tok.tokenize(ALPHABET))
        assert not chars & {tok.PAD, tok.BOS, tok.EOS}
        assert len({tok.PAD, tok.BOS, tok.EOS}) == 3

    def test_out_of_alphabet_lists_character(self, tok):
        with pytest.raises(ValueError, match="'q'"):
            tok.tokenize("quiz")

    @settings(max_examples=1000, deadline=None)
    @given(st.text(alphabet=ALPHABET, max_size=40))
    def test_round_trip(self, tok, s):
        assert tok.detokenize(tok.tokenize(s)) == s


class TestCausality:
    def test_future_tokens_do_not_move_logits(self, lm, tok):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            toks = rng.integers(1, tok.num_chars + 1, size=n).tolist()
            P = int(rng.integers(0, 4))
            prefix = Tensor(rng.normal(size=(P, TINY.d_llm))) if P else None
            j = int(rng.integers(0, n))
            changed = list(toks)
            changed[j] = changed[j] % tok.num_chars + 1
            a = lm(prefix, toks).data
            b = lm(prefix, changed).data
            # row t predicts token t from tokens < t, so rows 0..j are untouched
            np.testing.assert_array_equal(a[:j + 1], b[:j + 1])

    def test_absent_equals_empty_prefix(self, lm):
        toks = [3, 1, 4, 1, 5]
        a = lm(None, toks).data
        b = lm(Tensor(np.zeros((0, TINY.d_llm))), toks).data
        np.testing.assert_array_equal(a, b)

    def test_context_overflow(self, lm):
        with pytest.raises(ContractError):
            lm(Tensor(np.zeros((30, TINY.d_llm))), [1] * 11)

    def test_batch_matches_single(self, lm):
        rng = np.random.default_rng(1)
        prefix = rng.normal(size=(2, 3, TINY.d_llm))
        seqs = [[1, 2, 3, 4], [5, 6]]
        batch = clm_loss_batch(lm, Tensor(prefix), [3, 2], seqs).data
        assert batch[0] == pytest.approx(clm_loss(lm, Tensor(prefix[0]), seqs[0]).item(), abs=1e-12)
        assert batch[1] == pytest.approx(clm_loss(lm, Tensor(prefix[1, :2]), seqs[1]).item(), abs=1e-12)


class TestClmLoss:
    def test_uniform_vocab_two(self):
        lm2 = CausalLM(TINY, 2, RngState(0))
        lm2.head.weight.data[...] = 0.0
        lm2.head.bias.data[...] = 0.0
        assert clm_loss(lm2, None, [1, 0, 1]).item() == pytest.approx(3 * math.log(2), abs=1e-14)

    def test_certain_prediction_gives_zero(self, tok):
        m = CausalLM(TINY, tok.vocab_size, RngState(0))
        m.head.weight.data[...] = 0.0
        m.head.bias.data[...] = 0.0
        m.head.bias.data[5] = 60.0
        assert clm_loss(m, None, [5, 5, 5]).item() < 1e-20

    def test_manual_recomputation(self, lm):
        rng = np.random.default_rng(2)
        for _ in range(10):
            prefix = Tensor(rng.normal(size=(4, TINY.d_llm)))
            y = rng.integers(1, 20, size=6).tolist()
            logits = lm(prefix, y).data
            manual = -log_softmax(logits, axis=-1)[np.arange(6), y].sum()
            assert abs(clm_loss(lm, prefix, y).item() - manual) < 1e-12

    def test_empty_transcript(self, lm):
        with pytest.raises(ContractError):
            clm_loss(lm, None, [])

    def test_prefix_gradcheck_and_frozen_flow(self, tok):
        m = CausalLM(TINY, tok.vocab_size, RngState(4))
        m.freeze()
        prefix = Tensor(np.random.default_rng(5).normal(size=(3, TINY.d_llm)), requires_grad=True)
        y = [2, 7, 7, 1]
        assert gradcheck(lambda: clm_loss(m, prefix, y), [prefix]) < 1e-5
        prefix.grad = None
        clm_loss(m, prefix, y).backward()
        assert np.abs(prefix.grad).max() > 0
        assert all(p.grad is None or not p.grad.any() for p in m.parameters())


def test_tiers_strictly_ordered(tok):
    sizes = [CausalLM(LM_TIERS[t], tok.vocab_size, RngState(0)).num_parameters() for t in ("small", "medium", "large")]
    assert sizes[0] < sizes[1] < sizes[2]


def test_parameter_names_have_lm_prefix(lm):
    assert all(p.name.startswith("lm.") for p in lm.parameters())


def test_uniform_model_perplexity_is_vocab(tok):
    m = CausalLM(TINY, tok.vocab_size, RngState(0))
    m.head.weight.data[...] = 0.0
    m.head.bias.data[...] = 0.0
    assert perplexity(m, [[1, 2, 3], [4, 5]]) == pytest.approx(tok.vocab_size, rel=1e-12)


class TestPretrain:
    def test_memorise_one_sentence(self, tok):
        s = tok.tokenize("the cat sees a red box")
        cfg = replace(LM_TIERS["small"], context_cap=64)
        m = lm_pretrain([s], cfg, tok.vocab_size, RngState(0),
                        PretrainConfig(steps=200, batch_size=1, lr=3e-3, warmup_steps=10))
        assert perplexity(m, [s]) < 1.1
        assert m.frozen

    def test_beats_unigram_and_improves_monotonically(self, tok):
        from lail.data import gen_corpus
        corpus = gen_corpus(0, {"lm": 600, "dev": 60})
        train = [tok.tokenize(s) for s in corpus.sentences["lm"]]
        dev = [tok.tokenize(s) for s in corpus.sentences["dev"]]
        ppl = []
        for steps in (25, 75, 200):
            m = lm_pretrain(train, LM_TIERS["small"], tok.vocab_size, RngState(1),
                            PretrainConfig(steps=steps, batch_size=16, warmup_steps=20))
            ppl.append(perplexity(m, train[:200]))
        assert ppl[0] >= ppl[1] >= ppl[2]
        assert perplexity(m, dev) < unigram_perplexity(train, dev, tok.vocab_size)

    def test_freeze_survives_joint_training(self, tok):
        from lail.optim import AdamW
        m = CausalLM(TINY, tok.vocab_size, RngState(0))
        m.freeze()
        before = {k: v.copy() for k, v in m.state_dict().items()}
        prefix = Parameter(np.ones((2, TINY.d_llm)), "prefix")
        opt = AdamW(m.parameters() + [prefix], lr=0.1)
        clm_loss(m, prefix, [1, 2, 3]).backward()
        opt.step()
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(v, before[k])
        assert not np.array_equal(prefix.data, np.ones((2, TINY.d_llm)))

    def test_deterministic(self, tok):
        s = [tok.tokenize("a dog runs"), tok.tokenize("my hen naps")]
        cfg = PretrainConfig(steps=5, batch_size=2)
        a = lm_pretrain(s, TINY, tok.vocab_size, RngState(9), cfg).state_dict()
        b = lm_pretrain(s, TINY, tok.vocab_size, RngState(9), cfg).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
