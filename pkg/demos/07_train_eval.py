"""
Training with and without the auxiliary loss
============================================

A small encoder trained for a few epochs, first as a plain CTC baseline and
then with LM losses on layers 2 and 4.  Sizes are cut down so this runs in a
couple of minutes; the acceptance suite runs the full-size comparison.
"""

from lail.connector import LAILConfig
from lail.data import DataParams, generate_dataset
from lail.encoder import EncoderConfig
from lail.lm import LM_TIERS, PretrainConfig, Tokenizer, lm_pretrain
from lail.nn import RngState
from lail.train import TrainConfig, evaluate_wer, train_asr

ds = generate_dataset(0, DataParams(n_train=120, n_dev=8, n_test=30, n_lm=1000))
tok = Tokenizer(ds.alphabet())
lm = lm_pretrain([tok.tokenize(s) for s in ds.lm_text], LM_TIERS["small"], tok.vocab_size, RngState(0),
                 PretrainConfig(steps=200))
enc = EncoderConfig(num_layers=4, d_model=32, num_heads=4, ffn_dim=64)

for name, lail in (("baseline", LAILConfig(tap_layers=(), alpha=0.0)),
                   ("LAIL", LAILConfig(tap_layers=(2, 4), alpha=0.3))):
    metrics = []
    model = train_asr(TrainConfig(epochs=15, batch_size=8, lail=lail), ds, tok, lm if lail.alpha else None, enc, metrics)
    last = [m for m in metrics if m["kind"] == "epoch"][-1]
    wers = {s: round(evaluate_wer(model, ds, s, tok).wer, 1) for s in ("test_clean", "test_other")}
    print(name, {k: round(v, 3) for k, v in last.items() if k.startswith("mean")}, wers)
