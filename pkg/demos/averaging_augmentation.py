"""Averaging n same-class windows shrinks white-noise variance by about 1/n."""
import numpy as np

from gwanomaly import AugmentPlan, LabeledDataset, augment_class

rng = np.random.default_rng(1)
noise = LabeledDataset(rng.standard_normal((5000, 200, 2)), np.zeros(5000), ("background",), np.zeros(5000))
base = noise.x.var()
for n in (1, 3, 5, 10):
    out = augment_class(noise, AugmentPlan((n,), 5000, seed=n))
    print(f"n={n:2d}  variance ratio {out.x.var() / base:.3f}  (1/n = {1 / n:.3f})")
