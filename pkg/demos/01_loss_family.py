"""Balanced softmax on a single row of logits.

Run with ``python demos/01_loss_family.py``.
"""
import numpy as np

from balanced_il import ClassPrior, Tape, Tensor, backward, build_lambda, grad_check
from balanced_il.losses import balanced_softmax, balanced_softmax_ce, standard_softmax_ce

# %% three old classes with 5 exemplars each, two new classes with 100 samples
counts = np.array([5, 5, 5, 100, 100])
old = {0, 1, 2}
logits = np.array([[2.0, 1.5, 0.5, 1.0, 0.8]])

for mode, prior in [("balanced", ClassPrior(counts, old)),
                    ("alpha", ClassPrior(counts, old, alpha=0.25)),
                    ("relaxed", ClassPrior(counts, old, epsilon=0.2))]:
    lam = build_lambda(prior, mode)
    print(f"{mode:9s} lambda = {lam}")
    print(f"          probs  = {np.round(balanced_softmax(logits, lam), 3)}")

# the plain softmax for comparison
print("softmax           =", np.round(balanced_softmax(logits, np.ones(5)), 3))

# %% the loss on an old-class sample is larger under the balanced prior,
# so training pushes the rare class's logit up to make up for its small prior
y = [0]
print("standard CE :", standard_softmax_ce(logits, y).item())
print("balanced CE :", balanced_softmax_ce(logits, y, counts).item())

# %% the tape agrees with finite differences
err = grad_check(lambda z: balanced_softmax_ce(z, y, counts), logits)
print(f"grad check relative error {err:.2e}")

z = Tensor(logits, requires_grad=True)
with Tape():
    backward(balanced_softmax_ce(z, y, counts))
print("dL/dz =", np.round(z.grad, 4), " (q minus one-hot)")
