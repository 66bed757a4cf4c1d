"""
CTC loss, its brute-force oracle, and decoding
==============================================

The forward-backward recursion gives the negative log-likelihood of a label
sequence summed over all alignments.  For tiny inputs we can enumerate the
alignments directly and compare.
"""

import numpy as np
from scipy.special import log_softmax

from lail.ctc import ctc_brute_force, ctc_loss, greedy_decode, label_posteriors, prefix_beam_search

rng = np.random.default_rng(1)
logp = log_softmax(rng.normal(size=(5, 4)) * 2, axis=-1)   # 5 frames, blank + 3 labels
target = [1, 2, 2]

res = ctc_loss(logp, target)
print("forward-backward loss :", res.loss)
print("-log(brute force)     :", -ctc_brute_force(logp, target))

###############################################################################
# ``[1, 2, 2]`` needs at least four frames (a blank between the repeats).
# With three frames the loss is infinite and the gradient is zero.

print("infeasible:", ctc_loss(logp[:3], target).loss)

###############################################################################
# Greedy decoding collapses the frame argmax.  Prefix beam search sums over
# alignments; with a wide enough beam it returns the exact most probable
# label sequence.

post = label_posteriors(logp)
best = max(post, key=post.get)
print("greedy            :", greedy_decode(logp))
print("beam (width 1000) :", prefix_beam_search(logp, beam=1000))
print("exact MAP         :", list(best), f"p={np.exp(post[best]):.3f}")
