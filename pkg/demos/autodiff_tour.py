"""Record a small computation on a tape, run backward, and check it numerically."""
import numpy as np

from gwanomaly import DiffArray, Tape, backward, finite_diff_check
from gwanomaly import autodiff as ad

rng = np.random.default_rng(0)
w = DiffArray(rng.standard_normal((3, 4)), requires_grad=True, precision="double")
x = DiffArray(rng.standard_normal((5, 4)), precision="double")


def loss(_=None):
    h = ad.relu(ad.matmul(x, ad.transpose(w)))   # (5, 3)
    return ad.reduce("mean", ad.log(ad.add(ad.exp(h), 1.0)))


with Tape() as tape:
    out = loss()
    backward(out, tape)
print("loss", out.item())
print("dL/dw\n", w.grad)
print("max relative error vs central differences:", finite_diff_check(loss, w, 1e-4))
