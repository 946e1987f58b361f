"""Preference objectives over average-likelihood rewards.

Every function takes rewards ``p`` (tensors with values in (0, 1]) and
returns a scalar tensor.  The pair-wise variants are all built on
``-log sigmoid(.)``, evaluated through the stable ``softplus`` form.

Variant identifiers (used by the trainer and the command line):

=============  =====================================================
point-ce       cross-entropy between p and the normalized score
point-mse      squared error ``(score - p)**2``
pair-single    one chosen vs one rejected response
pair-mns       chosen vs each of N rejected, one sigmoid per pair
pair-mnm       chosen vs N rejected, differences merged in one sigmoid
pair-mcs       every score-ordered pair, one sigmoid per pair
pair-mcm       every score-ordered pair, merged in one sigmoid
list-mle       Plackett-Luce likelihood of the score ranking
dpo            reference-model baseline over summed log-likelihoods
=============  =====================================================
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor
from .data import oriented_pairs

MPPO_VARIANTS = ("point-ce", "point-mse", "pair-single", "pair-mns", "pair-mnm",
                 "pair-mcs", "pair-mcm", "list-mle")
VARIANTS = MPPO_VARIANTS + ("dpo",)


def check_variant(name: str) -> str:
    if name not in VARIANTS:
        raise ValueError(f"unknown loss variant {name!r}; valid identifiers: {', '.join(VARIANTS)}")
    return name


def _vector(p) -> Tensor:
    if isinstance(p, Tensor):
        return p.reshape(-1) if p.ndim != 1 else p
    if np.ndim(p) == 0:
        return Tensor([p])
    items = list(p)
    if items and all(isinstance(t, Tensor) for t in items):
        return ad.stack([t.reshape(()) for t in items])
    return Tensor(np.asarray(items, dtype=np.float64).reshape(-1))


def _scores(score, n: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(score, dtype=np.float64), (n,))
    if np.any(s < 0.1) or np.any(s > 1.0):
        raise ValueError(f"normalized scores must lie in [0.1, 1], got {s.tolist()}")
    return s


def point_ce(p, score) -> Tensor:
    """Mean of ``-[s log p + (1 - s) log(1 - p)]`` over the given items."""
    p = _vector(p)
    if np.any(p.values <= 0) or np.any(p.values >= 1):
        raise DomainError("point-ce needs 0 < p < 1")
    s = _scores(score, p.size)
    return -ad.mean(s * ad.log(p) + (1.0 - s) * ad.log(1.0 - p))


def point_mse(p, score) -> Tensor:
    """Mean of ``(s - p)**2``; the sign is positive so that minimizing fits p to s."""
    p = _vector(p)
    s = _scores(score, p.size)
    return ad.mean(ad.power(s - p, 2))


def pair_single(p_w, p_l) -> Tensor:
    return -ad.sum(ad.log_sigmoid(ad.sub(p_w, p_l)))


def mn_arguments(p_w, p_l) -> Tensor:
    """Per-rejection sigmoid arguments ``p_w - p_l_i``."""
    p_l = _vector(p_l)
    if p_l.size == 0:
        raise ValueError("at least one rejected response is required")
    return ad.sub(ad.as_tensor(p_w).reshape(()), p_l)


def mnm_argument(p_w, p_l) -> Tensor:
    """Merged argument ``N * p_w - sum_i p_l_i``."""
    p_l = _vector(p_l)
    if p_l.size == 0:
        raise ValueError("at least one rejected response is required")
    return ad.as_tensor(p_w).reshape(()) * float(p_l.size) - ad.sum(p_l)


def pair_mns(p_w, p_l) -> Tensor:
    return -ad.sum(ad.log_sigmoid(mn_arguments(p_w, p_l)))


def pair_mnm(p_w, p_l) -> Tensor:
    return -ad.log_sigmoid(mnm_argument(p_w, p_l))


def mc_arguments(p, scores: Sequence[float]) -> Tensor:
    """``p_w - p_l`` for every pair of distinct scores, oriented by score."""
    p = _vector(p)
    if p.size != len(scores):
        raise ValueError(f"{p.size} rewards but {len(scores)} scores")
    pairs = oriented_pairs(scores)
    if not pairs:
        raise ValueError("no pair with distinct scores to compare")
    w, l = np.array(pairs).T
    return ad.take(p, w) - ad.take(p, l)


def pair_mcs(p, scores: Sequence[float]) -> Tensor:
    return -ad.sum(ad.log_sigmoid(mc_arguments(p, scores)))


def pair_mcm(p, scores: Sequence[float]) -> Tensor:
    return -ad.log_sigmoid(ad.sum(mc_arguments(p, scores)))


def list_mle(p_ranked) -> Tensor:
    """Plackett-Luce negative log-likelihood of the given order (best first)."""
    p = _vector(p_ranked)
    n = p.size
    if n == 0:
        raise ValueError("list-mle needs at least one item")
    if n == 1:
        return ad.sum(p) * 0.0
    terms = [ad.take(ad.log_softmax(ad.take(p, np.arange(i, n))), 0) for i in range(n - 1)]
    # the last factor is exp(p_n) / exp(p_n) == 1
    return -ad.sum(ad.stack(terms))


def dpo(logp_w, logp_l, ref_logp_w, ref_logp_l, beta: float) -> Tensor:
    """DPO objective on summed sequence log-likelihoods."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    margin = ad.sub(ad.sub(logp_w, ref_logp_w), ad.sub(logp_l, ref_logp_l)) * float(beta)
    return -ad.sum(ad.log_sigmoid(margin))


# -- gradient-check problems --------------------------------------------------------

def gradcheck_case(variant: str, rng: np.random.Generator,
                   n_items: int = 4) -> tuple[Callable[[Tensor], Tensor], np.ndarray]:
    """A random interior point and a closure evaluating ``variant`` there."""
    check_variant(variant)
    p = rng.uniform(0.05, 0.95, n_items)
    if variant in ("point-ce", "point-mse"):
        scores = rng.integers(1, 11, n_items) / 10.0
        fn = point_ce if variant == "point-ce" else point_mse
        return (lambda x: fn(x, scores)), p
    if variant == "pair-single":
        return (lambda x: pair_single(ad.take(x, 0), ad.take(x, 1))), p[:2]
    if variant in ("pair-mns", "pair-mnm"):
        fn = pair_mns if variant == "pair-mns" else pair_mnm
        return (lambda x: fn(ad.take(x, 0), ad.take(x, np.arange(1, x.size)))), p
    if variant in ("pair-mcs", "pair-mcm"):
        scores = rng.permutation(np.arange(1, n_items + 1)).astype(float)
        fn = pair_mcs if variant == "pair-mcs" else pair_mcm
        return (lambda x: fn(x, scores)), p
    if variant == "list-mle":
        return list_mle, p
    logps = rng.uniform(-30.0, -1.0, 4)
    beta = float(rng.uniform(0.05, 0.5))
    return (lambda x: dpo(*(ad.take(x, i) for i in range(4)), beta=beta)), logps
