"""
The synthetic speech corpus
===========================

Sentences come from a toy grammar.  Each character maps to one or two
phonemes, each phoneme is held for a few frames, and Gaussian noise is added
at one of two levels.  The clean level is easy for a nearest-prototype
classifier; the other level is not.
"""

import numpy as np

from lail.data import DataParams, generate_dataset, make_inventory, render_utterance
from lail.nn import RngState

p = DataParams(n_train=40, n_dev=4, n_test=20, n_lm=10)
ds = generate_dataset(0, p)
inv = make_inventory(0, ds.alphabet())
u = ds.split("train")[0]
print(repr(u.text), "->", u.features.shape, "frames x dims")

for sigma in (p.sigma_clean, p.sigma_other):
    hits = total = 0
    for i, utt in enumerate(ds.split("test_clean")):
        fs = render_utterance(utt.text, inv, sigma, RngState(5).child(str(i)))
        labels = np.repeat(fs.phonemes, fs.durations)
        hits += int((inv.nearest(fs.features) == labels).sum())
        total += len(labels)
    print(f"sigma={sigma}: nearest-prototype frame accuracy {hits / total:.3f}")

print("dataset digest:", ds.digest()[:16])
