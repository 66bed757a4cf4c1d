"""
A Conformer encoder with intermediate taps
==========================================

The encoder subsamples features by two, then runs a stack of Conformer
layers (half-step FFN, self-attention, convolution, half-step FFN, layer
norm).  Any layer's output can be returned as a tap.
"""

import numpy as np

from lail.encoder import Encoder, EncoderConfig
from lail.nn import RngState

cfg = EncoderConfig(num_layers=4, d_model=32, num_heads=4, ffn_dim=64)
enc = Encoder(cfg, RngState(0))
print(f"{enc.num_parameters()} parameters")

feats = np.random.default_rng(0).normal(size=(2, 23, cfg.d_feat))
out = enc(feats, lengths=[23, 15], taps=(2, 4))
print("frame counts after the front end:", out.lengths)
print("tap shapes:", {l: h.shape for l, h in out.hidden.items()})

###############################################################################
# The last tap is the encoder output itself.

print("tap 4 is the final output:", np.array_equal(out.hidden[4].data, out.final.data))
