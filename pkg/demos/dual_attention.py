"""Spatial and spectral heads on one second of (channels, bands) features.

A spatial head builds a channels x channels attention map and mixes rows; a
spectral head builds a d_head x d_head map over the projected band axis and
mixes columns. Either way the layer is equivariant to reordering channels,
which the printout checks for each head policy.
"""
import numpy as np

from dua.attention import AttentionConfig, DualMultiHeadAttention
from dua.numerics import Tensor

rng = np.random.default_rng(0)
x = rng.normal(size=(63, 10))
perm = rng.permutation(63)

for policy in ("none", "alternate_spatial_spectral", "spectral_only"):
    cfg = AttentionConfig(d_model=10, n_heads=6, d_head=10, ffn_hidden=40, transposed_head_policy=policy)
    mhsa = DualMultiHeadAttention(cfg, np.random.default_rng(1), np.float64)
    out = mhsa(Tensor(x)).data
    out_perm = mhsa(Tensor(x[perm])).data
    maps = ["63x63" if k == "spatial" else "10x10" for k in mhsa.kinds]
    print(f"{policy}: maps {maps}")
    print(f"  output {out.shape}, channel-reordering error {np.max(np.abs(out[perm] - out_perm)):.1e}")
