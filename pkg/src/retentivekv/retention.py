"""Retention scoring: which evicted tokens deserve a continuous afterlife.

Scores combine immediate importance (accumulated attention) with prospective
uncertainty (cross-modal attention entropy), both min-max normalized over the
current candidate set so a single mixing weight can trade them off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import NegativeInput, NoVisualTokens, NotADistribution, OutOfRange
from .kv_cache import KVEntry
from .numerics import Vector, as_vector

_DISTRIBUTION_TOL = 1e-9


@dataclass
class EntropyReport:
    """Cross-modal entropy of one attention step.

    per_token maps a visual token id to its contribution -p ln p within the
    visual-restricted, renormalized distribution; total is their sum, i.e.
    the Shannon entropy of that distribution in nats.
    """

    step: int
    per_token: dict[int, float] = field(default_factory=dict)
    total: float = 0.0


class Action(Enum):
    KEEP = "keep"
    ABSORB = "absorb"
    DROP = "drop"


@dataclass(frozen=True)
class RetentionDecision:
    token_id: int
    score: float
    action: Action


def cross_modal_entropy(
    weights: Vector,
    visual_mask: Sequence[bool],
    step: int,
    token_ids: Sequence[int] | None = None,
) -> EntropyReport:
    """Entropy of an attention distribution restricted to visual positions.

    weights must already be a probability distribution (straight from
    attend). Visual weights are renormalized to sum 1 before the entropy is
    taken; a zero renormalized weight contributes 0 by continuity.

    token_ids labels the report's per_token keys; defaults to positions.
    """
    weights = as_vector(weights)
    if len(visual_mask) != weights.shape[0]:
        raise NotADistribution("mask length differs from weights length")
    if np.any(weights < -_DISTRIBUTION_TOL) or abs(float(np.sum(weights)) - 1.0) > _DISTRIBUTION_TOL:
        raise NotADistribution("weights are not a probability distribution")
    ids = list(token_ids) if token_ids is not None else list(range(weights.shape[0]))
    visual_idx = [i for i, v in enumerate(visual_mask) if v]
    if not visual_idx:
        raise NoVisualTokens("no visual positions in mask")
    visual_w = weights[visual_idx]
    mass = float(np.sum(visual_w))
    report = EntropyReport(step=step)
    for i in visual_idx:
        p = float(weights[i]) / mass if mass > 0.0 else 0.0
        contribution = -p * math.log(p) if p > 0.0 else 0.0
        report.per_token[ids[i]] = contribution
        report.total += contribution
    return report


def retention_score(alpha_norm: float, entropy_norm: float, mix: float) -> float:
    """Convex mix of normalized attention and normalized entropy.

    mix = 1 keeps only immediate importance; mix = 0 only prospective
    uncertainty. All three inputs live in [0, 1], so the score does too.
    """
    for name, value in (("alpha_norm", alpha_norm), ("entropy_norm", entropy_norm), ("mix", mix)):
        if not 0.0 <= value <= 1.0:
            raise OutOfRange(f"{name}={value} outside [0, 1]")
    return mix * alpha_norm + (1.0 - mix) * entropy_norm


def normalize_scores(values: Mapping[int, float]) -> dict[int, float]:
    """Min-max normalization onto [0, 1]; a constant input maps to all 1s."""
    if not values:
        raise NegativeInput("normalize_scores: empty input")
    if any(v < 0.0 for v in values.values()):
        raise NegativeInput("normalize_scores: negative input")
    lo = min(values.values())
    hi = max(values.values())
    if hi == lo:
        return {k: 1.0 for k in values}
    span = hi - lo
    return {k: (v - lo) / span for k, v in values.items()}


def partition_evicted(
    candidates: Sequence[KVEntry],
    reports: Iterable[EntropyReport] | None,
    mix: float,
    tau_quantile: float,
) -> list[RetentionDecision]:
    """Split eviction candidates into Absorb (score above the quantile
    threshold) and Drop.

    Entropy per candidate is its most recent per-token contribution in
    `reports` when one exists, else the value stored on the entry. Ties at
    the threshold all absorb, so lowering tau_quantile only ever grows the
    Absorb set.
    """
    if not candidates:
        raise OutOfRange("partition_evicted: no candidates")
    if not 0.0 <= tau_quantile <= 1.0:
        raise OutOfRange(f"tau_quantile={tau_quantile} outside [0, 1]")

    latest_entropy: dict[int, float] = {}
    if reports is not None:
        for report in reports:  # later reports overwrite earlier ones
            latest_entropy.update(report.per_token)

    alphas = {e.meta.token_id: e.accum_attn for e in candidates}
    entropies = {
        e.meta.token_id: latest_entropy.get(e.meta.token_id, e.last_entropy)
        for e in candidates
    }
    alpha_norm = normalize_scores(alphas)
    entropy_norm = normalize_scores(entropies)
    scores = {
        tid: retention_score(alpha_norm[tid], entropy_norm[tid], mix)
        for tid in alphas
    }
    threshold = float(np.quantile(list(scores.values()), tau_quantile))
    return [
        RetentionDecision(
            token_id=e.meta.token_id,
            score=scores[e.meta.token_id],
            action=Action.ABSORB if scores[e.meta.token_id] >= threshold else Action.DROP,
        )
        for e in candidates
    ]
