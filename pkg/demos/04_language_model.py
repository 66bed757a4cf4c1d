"""
A small frozen causal LM
========================

The language model reads an optional run of prefix vectors (the audio
prefix), then BOS, then the characters.  Here we pretrain the small tier on
grammar text and compare it with a unigram model.
"""

from lail.data import gen_corpus
from lail.lm import LM_TIERS, PretrainConfig, Tokenizer, lm_pretrain, perplexity, unigram_perplexity
from lail.nn import RngState

corpus = gen_corpus(0, {"lm": 1000, "dev": 100})
tok = Tokenizer(corpus.alphabet())
train = [tok.tokenize(s) for s in corpus.sentences["lm"]]
dev = [tok.tokenize(s) for s in corpus.sentences["dev"]]
print(corpus.sentences["lm"][:3])

curve = []
lm = lm_pretrain(train, LM_TIERS["small"], tok.vocab_size, RngState(0), PretrainConfig(steps=300), curve)
for rec in curve[::3]:
    print(rec)

print(f"dev perplexity {perplexity(lm, dev):.2f} vs unigram "
      f"{unigram_perplexity(train, dev, tok.vocab_size):.2f}")
print("frozen after pretraining:", lm.frozen)
