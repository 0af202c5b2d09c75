"""Training loss: next-token cross-entropy plus the routing auxiliary terms.

The router terms are computed on the soft (pre-top-1) distributions; on the
one-hot outputs every entropy is identically zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import DiffArray, as_diff, check_distribution, entropy, log_softmax, neg_entropy_unchecked, pick

DEFAULT_LAMBDA = 0.1


def next_token_loss(logits, target_ids, role_mask) -> DiffArray:
    """Mean cross-entropy over the positions flagged in ``role_mask``.

    ``logits[..., j, :]`` is the prediction for ``target_ids[..., j]``.
    """
    logits = as_diff(logits)
    mask = np.asarray(role_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise InvalidInputError("next_token_loss needs at least one target position")
    ids = np.where(mask, np.asarray(target_ids, dtype=np.int64), 0)
    nll = -pick(log_softmax(logits), ids)
    return (nll * mask.astype(np.float64)).sum() * (1.0 / n)


def indep_entropy_loss(soft_indep) -> DiffArray:
    return entropy(soft_indep)


def dep_entropy_loss(soft_dep_batch) -> DiffArray:
    """Batch mean of per-sample router entropies, input (B, M)."""
    soft = as_diff(soft_dep_batch)
    if soft.ndim != 2 or soft.shape[0] < 1:
        raise InvalidInputError("expected a (B, M) batch of distributions")
    return entropy(soft, axis=-1).mean()


def dep_diversity_loss(soft_dep_batch) -> DiffArray:
    """sum_k rbar[k] ln rbar[k] for the batch-mean routing distribution rbar.

    Minimised (at -ln M) by perfectly balanced expert usage.
    """
    soft = as_diff(soft_dep_batch)
    if soft.ndim != 2 or soft.shape[0] < 1:
        raise InvalidInputError("expected a (B, M) batch of distributions")
    check_distribution(soft.values, axis=-1)
    return neg_entropy_unchecked(soft.mean(axis=0))


@dataclass
class LossBreakdown:
    next_token: float
    indep_ent: float
    dep_ent: float
    dep_div: float
    wee: float
    total: float
    lam: float = DEFAULT_LAMBDA
    diversity_weight: float = 1.0

    def as_row(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class LossTerms:
    """Differentiable parts plus the composed total."""

    next_token: DiffArray
    indep_ent: DiffArray
    dep_ent: DiffArray
    dep_div: DiffArray
    wee: DiffArray
    total: DiffArray
    lam: float
    diversity_weight: float

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(self.next_token.item(), self.indep_ent.item(), self.dep_ent.item(),
                             self.dep_div.item(), self.wee.item(), self.total.item(),
                             self.lam, self.diversity_weight)


def _zero() -> DiffArray:
    return DiffArray(0.0)


def total_loss(next_token, indep_ent=None, dep_ent=None, dep_div=None,
               lam: float = DEFAULT_LAMBDA, diversity_weight: float = 1.0) -> LossTerms:
    """total = next_token + lam * 0.5 * (indep_ent + dep_ent + diversity_weight * dep_div).

    Missing router terms (variants without that router) count as 0.
    """
    nt = as_diff(next_token)
    ie = _zero() if indep_ent is None else as_diff(indep_ent)
    de = _zero() if dep_ent is None else as_diff(dep_ent)
    dd = _zero() if dep_div is None else as_diff(dep_div)
    inner = ie + de
    if diversity_weight == 1.0:
        inner = inner + dd
    elif diversity_weight != 0.0:
        inner = inner + dd * diversity_weight
    wee = inner * 0.5
    total = nt + wee * lam
    return LossTerms(nt, ie, de, dd, wee, total, lam, diversity_weight)


def compose(next_token: float, indep_ent: float, dep_ent: float, dep_div: float,
            lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """Plain-float composition; the reference the differentiable path must match."""
    wee = 0.5 * (indep_ent + dep_ent + dep_div)
    return LossBreakdown(next_token, indep_ent, dep_ent, dep_div, wee, next_token + lam * wee, lam)


def max_entropy(num_experts: int) -> float:
    return math.log(num_experts)
