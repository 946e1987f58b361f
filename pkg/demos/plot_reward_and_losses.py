"""
=====================================
Rewards and the preference objectives
=====================================

The reward of a response is its average token likelihood: the geometric mean
of the per-token probabilities, so long and short answers are comparable.
Every objective in :mod:`mppo.losses` is a function of these rewards.
"""

# %%
# A hand-built bigram policy
# --------------------------
#
# Three response tokens with probabilities 0.5, 0.5 and 0.125 give
# p = (1/32) ** (1/3).

import math

import numpy as np

from mppo import losses as L
from mppo.autodiff import Tensor
from mppo.model import BOS, EOS, BigramModel, ModelConfig, TokenSequence, avg_likelihood

probs = np.full((6, 6), 1 / 6)
probs[BOS] = [0.1, 0.0, 0.1, 0.5, 0.2, 0.1]
probs[3] = [0.1, 0.1, 0.1, 0.1, 0.5, 0.1]
probs[4] = [0.175, 0.175, 0.125, 0.175, 0.175, 0.175]
with np.errstate(divide="ignore"):
    table = np.maximum(np.log(probs), -1e4)
model = BigramModel(ModelConfig("bigram", vocab_size=6), {"table": Tensor(table)})

p = avg_likelihood(model, TokenSequence((BOS,), (3, 4, EOS))).item()
print(f"p = {p:.12f}   2**(-5/3) = {2 ** (-5 / 3):.12f}")

# %%
# One chosen answer against three rejected ones
# ---------------------------------------------
#
# MNS adds one sigmoid term per rejected answer.  MNM merges the differences
# inside a single sigmoid, so its gradient saturates together.

p_w, p_l = 0.8, [0.5, 0.4, 0.3]
print("pair-single", L.pair_single(p_w, p_l[0]).item())
print("pair-mns   ", L.pair_mns(p_w, p_l).item())
print("pair-mnm   ", L.pair_mnm(p_w, p_l).item(), " = ln(1 + e^-1.2) =", math.log1p(math.exp(-1.2)))

# %%
# All score-ordered pairs of a record
# -----------------------------------

p = [0.8, 0.5, 0.3]
scores = [9.0, 7.0, 4.0]
print("pairs      ", L.oriented_pairs(scores))
print("pair-mcs   ", L.pair_mcs(p, scores).item())
print("pair-mcm   ", L.pair_mcm(p, scores).item())
print("list-mle   ", L.list_mle(p).item())

# ties in score never form a pair
print("tied pairs ", L.oriented_pairs([8.0, 8.0, 3.0]))

# %%
# With a single rejected answer the pair and list views coincide.

for fn in (lambda: L.pair_mns(0.7, [0.2]), lambda: L.pair_mnm(0.7, [0.2]), lambda: L.list_mle([0.7, 0.2])):
    print(fn().item(), L.pair_single(0.7, 0.2).item())
