"""Turn a raw multichannel recording into per-second DE features.

A 9 Hz tone of amplitude 2 on one channel and white noise on another; the
tone's energy shows up in the 8-10 Hz band at the Gaussian entropy value.
"""
import math

import numpy as np

from dua.features import BANDS, de_features

fs = 200.0
t = np.arange(int(5 * fs)) / fs
raw = np.stack([2.0 * np.sin(2 * np.pi * 9.0 * t), np.random.default_rng(0).normal(size=t.size)], axis=1)

de = de_features(raw, fs)
print("features:", de.shape, "(seconds, channels, bands)")
print("band      tone    noise")
for j, (name, lo, hi) in enumerate(BANDS):
    print(f"{name:8s} {de[0, 0, j]:7.3f} {de[0, 1, j]:7.3f}")
print("expected tone DE in its band:", round(0.5 * math.log(2 * math.pi * math.e * 2.0**2 / 2), 3))
