"""Finite-difference check of every parameter gradient through the full model.

The toy configuration keeps the check to a few seconds; it covers the
transposed (spectral) heads, masking, the temporal encoder and the reversal
layer feeding the domain discriminator.
"""
import numpy as np

from dua.features import Trial
from dua.harness import toy_model_config
from dua.model import DuAModel, format_summary
from dua.training import collate, loss_gradcheck

cfg = toy_model_config()
model = DuAModel(cfg, seed=0, dtype=np.float64)
print(format_summary(model))

rng = np.random.default_rng(0)
trials = [Trial("src", "a", 1, rng.normal(size=(4, 5, 3))), Trial("tgt", "b", 0, rng.normal(size=(3, 5, 3)))]
batch = collate(trials, [0, 1], dtype=np.float64)
for lam in (0.0, 0.3, 1.0):
    print(f"lambda={lam}:", loss_gradcheck(model, batch, lam).summary())
