"""Herding picks exemplars whose running mean tracks the class mean.

Run with ``python demos/02_herding.py``.
"""
import numpy as np

from balanced_il import herding_select, random_select

rng = np.random.default_rng(0)
features = rng.normal(size=(200, 8)) + rng.normal(size=8)
mu = features.mean(axis=0)

herd = herding_select(features, 20)
rand = random_select(200, 20, seed=0)

# distance between the class mean and the mean of the first m picks
print(" m   herding   random")
for m in (1, 2, 5, 10, 20):
    d_h = np.linalg.norm(mu - features[herd[:m]].mean(axis=0))
    d_r = np.linalg.norm(mu - features[rand[:m]].mean(axis=0))
    print(f"{m:2d}   {d_h:.4f}    {d_r:.4f}")

# a smaller budget keeps a prefix of the larger selection
assert herding_select(features, 5) == herd[:5]
print("prefix property holds: first 5 of 20 =", herd[:5])
