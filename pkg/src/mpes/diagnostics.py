"""Deviance-based conflict diagnostics.

Each evidence item's fit is scored by its posterior mean deviance against
the saturated model (the likelihood maximized at the observed data). A
well-fitting item contributes about one unit; items whose mean deviance
exceeds the flag threshold are reported as potential conflicts between
that data source and the rest of the synthesis.

Binomial observations sitting on the boundary (no successes or all
successes) carry no information about their own saturated fit scale and
are excluded from the scored set, but still enter the posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evidence import (BinomialCount, EvidenceItem, MultinomialSplit,
                       PoissonTotal, loglik_item)

DEFAULT_FLAG_THRESHOLD = 4.0


def _xlogx(x: float) -> float:
    return 0.0 if x == 0.0 else x * math.log(x)


def saturated_loglik(item: EvidenceItem) -> float:
    """Log-likelihood at the data-determined parameter estimate."""
    kind = item.kind
    if isinstance(kind, BinomialCount):
        x, n = kind.x, kind.n
        return (math.lgamma(n + 1) - math.lgamma(x + 1) - math.lgamma(n - x + 1)
                + _xlogx(x) + _xlogx(n - x) - _xlogx(n))
    if isinstance(kind, PoissonTotal):
        m = kind.m
        if m == 0:
            return 0.0
        return m * math.log(m) - m - math.lgamma(m + 1)
    if isinstance(kind, MultinomialSplit):
        counts = kind.counts
        total = sum(counts)
        out = math.lgamma(total + 1)
        for c in counts:
            out += -math.lgamma(c + 1) + _xlogx(c)
        out -= _xlogx(total)
        return out
    raise TypeError(f"unknown observation kind {type(kind).__name__}")


def deviance(item: EvidenceItem, state) -> float:
    """Deviance of one item at one state; +inf when the state has no support."""
    ll = loglik_item(item, state)
    if ll == -math.inf:
        return math.inf
    return -2.0 * (ll - saturated_loglik(item))


def exclusion_reason(item: EvidenceItem) -> str | None:
    """Why an item is left out of the scored set, or None if it is scored."""
    if item.deviance_eligible:
        return None
    kind = item.kind
    if isinstance(kind, BinomialCount):
        if kind.x == 0:
            return "boundary count (0 successes)"
        if kind.x == kind.n:
            return "boundary count (all successes)"
    return "marked ineligible"


def eligibility_filter(items) -> tuple[list[EvidenceItem],
                                       list[tuple[EvidenceItem, str]]]:
    eligible, excluded = [], []
    for it in items:
        reason = exclusion_reason(it)
        if reason is None:
            eligible.append(it)
        else:
            excluded.append((it, reason))
    return eligible, excluded


@dataclass
class ItemDeviance:
    item_id: str
    region: str
    gender: str
    target_label: str
    mean_deviance: float | None  # None when excluded
    flagged: bool
    excluded_reason: str | None = None


@dataclass
class DevianceReport:
    total: float  # posterior mean total deviance over eligible items
    n_scored: int
    n_excluded: int
    threshold: float
    rows: list[ItemDeviance] = field(default_factory=list)

    @property
    def flagged(self) -> list[ItemDeviance]:
        return [r for r in self.rows if r.flagged]


def posterior_mean_deviance(sample, items,
                            threshold: float = DEFAULT_FLAG_THRESHOLD) -> DevianceReport:
    """Score every eligible item by its mean deviance over retained draws.

    The total is the mean of the per-draw total deviance, which equals the
    sum of per-item means whenever all draws have support everywhere.
    """
    eligible, excluded = eligibility_filter(items)
    sat = np.array([saturated_loglik(it) for it in eligible])
    sums = np.zeros(len(eligible))
    inf_hit = np.zeros(len(eligible), dtype=bool)
    n_draws = 0
    for state in sample.states():
        for j, it in enumerate(eligible):
            ll = loglik_item(it, state)
            if ll == -math.inf:
                inf_hit[j] = True
            else:
                sums[j] += -2.0 * (ll - sat[j])
        n_draws += 1
    if n_draws == 0:
        raise ValueError("sample contains no draws")

    rows = []
    total = 0.0
    for j, it in enumerate(eligible):
        mean = math.inf if inf_hit[j] else sums[j] / n_draws
        total += mean
        rows.append(ItemDeviance(
            item_id=it.id, region=it.region, gender=it.gender,
            target_label=it.target_label, mean_deviance=mean,
            flagged=mean > threshold))
    for it, reason in excluded:
        rows.append(ItemDeviance(
            item_id=it.id, region=it.region, gender=it.gender,
            target_label=it.target_label, mean_deviance=None,
            flagged=False, excluded_reason=reason))
    order = {it.id: k for k, it in enumerate(items)}
    rows.sort(key=lambda r: order[r.item_id])
    return DevianceReport(total=float(total), n_scored=len(eligible),
                          n_excluded=len(excluded), threshold=threshold,
                          rows=rows)
