"""
Connectors and the intermediate LM loss
=======================================

Each tapped encoder layer gets its own connector: ``k`` stride-2
convolutions with swish, then a projection to the LM width.  The projected
frames become the LM prefix, and the LM's loss on the transcript is the
per-layer term of the auxiliary loss.
"""

import numpy as np

from lail.connector import ConnectorStack, LAILConfig, build_connectors, lail_loss, total_loss
from lail.lm import CausalLM, CausalLMConfig
from lail.nn import RngState
from lail.tensor import Tensor

stack = ConnectorStack(d_model=16, d_llm=32, k=2, rng=RngState(0))
for T in (1, 7, 8, 9, 100):
    z, _ = stack(Tensor(np.zeros((T, 16))))
    print(f"T={T:3d} -> {z.shape[0]} prefix vectors of width {z.shape[1]}")

###############################################################################
# Two taps with uniform weights: the auxiliary loss is the mean of the
# per-layer LM losses.

lm = CausalLM(CausalLMConfig(d_llm=32, num_layers=2, num_heads=2), vocab_size=10, rng=RngState(1))
lm.freeze()
cfg = LAILConfig(tap_layers=(2, 4), alpha=0.3)
stacks = build_connectors(16, 32, cfg, RngState(2))
rng = np.random.default_rng(3)
taps = {l: Tensor(rng.normal(size=(2, 12, 16))) for l in cfg.tap_layers}
lail, per_layer = lail_loss(cfg, taps, stacks, lm, [[1, 2, 3], [4, 5]], np.array([12, 9]))
print({l: round(v.item(), 4) for l, v in per_layer.items()}, "->", round(lail.item(), 4))
print("total with ctc=2.0:", total_loss(Tensor(2.0), lail, cfg.alpha).item())
