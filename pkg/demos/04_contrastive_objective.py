"""The cluster-weighted contrastive loss on hand-built geometry: closed
forms, the alpha sweep, and the mixture with cross-entropy."""

import math

import numpy as np

from wclgen import Tensor, mixture_loss, wcl_loss
from wclgen.model import BatchLatents


def latents(sims, labels):
    s = Tensor(np.asarray(sims, dtype=float))
    return BatchLatents(z_x=s, z_y=s, sims=s, labels=np.asarray(labels), tau=1.0)


# two perfectly-aligned pairs, orthogonal across pairs
aligned = [[1.0, 0.0], [0.0, 1.0]]

different = wcl_loss(latents(aligned, [0, 1]), alpha=2.0).item()
print(f"labels differ:  loss = {different:.6f}  (= ln(1+e^-1) = "
      f"{math.log(1 + math.exp(-1)):.6f})")

same = wcl_loss(latents(aligned, [0, 0]), alpha=2.0).item()
print(f"labels equal:   loss = {same:.6f}  (= ln(1+2e^-1) = "
      f"{math.log(1 + 2 * math.exp(-1)):.6f})")
print("same-cluster negatives cost more because alpha = 2 weights them up\n")

rng = np.random.default_rng(1)
sims = rng.normal(size=(6, 6))
labels = [0, 0, 0, 1, 1, 2]
print("alpha sweep on a random batch with same-cluster negatives:")
for alpha in (0.0, 0.5, 1.0, 2.0, 5.0):
    print(f"  alpha={alpha:>3}: {wcl_loss(latents(sims, labels), alpha).item():.4f}")
print("monotone in alpha: harder negatives, larger loss\n")

ce, contrastive = 2.0, 0.5
print(f"mixture at lambda=0.2: {mixture_loss(ce, contrastive, 0.2)} "
      f"(= 0.8*{ce} + 0.2*{contrastive})")
