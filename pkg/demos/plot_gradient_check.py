"""
===================
Checking gradients
===================

Every loss is built from a handful of primitives on the autodiff tape.
``grad_check`` compares the backward pass with central differences.
"""

# %%
# A single primitive
# ------------------

import numpy as np

from mppo import autodiff as ad
from mppo import losses as L

x = ad.Tensor([0.3, -1.2, 2.0], requires_grad=True)
with ad.Tape():
    y = ad.sum(ad.log_sigmoid(x))
    ad.backward(y)
print("analytic", x.grad)
print("1 - sigmoid(x)", 1 - 1 / (1 + np.exp(-x.values)))

# %%
# Every objective at random interior points
# ------------------------------------------

rng = np.random.default_rng(0)
for variant in L.VARIANTS:
    worst = max(ad.grad_check(*L.gradcheck_case(variant, rng)).max_error for _ in range(100))
    print(f"{variant:12s} worst relative error {worst:.2e}")

# %%
# A broken gradient is caught
# ---------------------------
#
# Forward computes x**2, but the backward rule claims 3 x**2.

def bad(t):
    return ad._make(t.values ** 2, (t,), lambda g: (3 * g * t.values ** 2,)).sum()


report = ad.grad_check(bad, [2.0])
print("passed:", report.passed, " analytic", report.analytic, " numeric", report.numeric)
