"""Importance scoring: five-factor composite, calibrated four-signal variant,
decay, and promote/retain/prune classification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyBatch, InvalidWeights, NegativeElapsed
from .model import EpisodicRecord, MemoryEvent, StoreConfig, hours_between

FIVE_FACTOR_DEFAULTS = {
    "recency": 0.25,
    "frequency": 0.25,
    "surprise": 0.20,
    "entity_salience": 0.15,
    "outcome": 0.15,
}

CALIBRATED_FOUR_DEFAULTS = {
    "content_length": 0.363,
    "turn_position": 0.325,
    "surprise": 0.293,
    "recency": 0.019,
}


@dataclass(frozen=True)
class SignalWeights:
    mode: str = "five_factor"  # or "calibrated_four"
    weights: dict[str, float] = field(default_factory=lambda: dict(FIVE_FACTOR_DEFAULTS))

    def __post_init__(self):
        if self.mode not in ("five_factor", "calibrated_four"):
            raise InvalidWeights(f"unknown mode {self.mode!r}")
        if any(w < 0 for w in self.weights.values()):
            raise InvalidWeights("weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise InvalidWeights("weights must sum to 1")

    @classmethod
    def calibrated_four(cls, weights: Optional[dict[str, float]] = None) -> "SignalWeights":
        return cls(mode="calibrated_four",
                   weights=dict(weights or CALIBRATED_FOUR_DEFAULTS))


def recency_factor(encoded_at: datetime, now: datetime, lam: float) -> float:
    dt = hours_between(encoded_at, now)
    if dt < 0:
        raise NegativeElapsed(f"now precedes encoding by {-dt:.3f}h")
    return math.exp(-lam * dt)


def frequency_factor(record: EpisodicRecord, earlier: Sequence[EpisodicRecord],
                     threshold: float) -> float:
    """1 / (1 + n) where n counts earlier records similar above threshold."""
    n = 0
    for other in earlier:
        if other.id == record.id:
            continue
        if float(np.dot(other.embedding, record.embedding)) >= threshold:
            n += 1
    return 1.0 / (1.0 + n)


def surprise_factor(embedding: np.ndarray,
                    prior_centroid: Optional[np.ndarray]) -> float:
    """Novelty relative to the running centroid of previously scored
    embeddings; maximally novel when there is no prior."""
    if prior_centroid is None:
        return 1.0
    cos = float(np.dot(embedding, prior_centroid))
    return min(max(1.0 - cos, 0.0), 1.0)


def entity_salience_factor(entities: Sequence[str], graph) -> float:
    if not entities:
        return 0.0
    return max((graph.entity_importance(name) for name in entities), default=0.0)


def outcome_factor(event: MemoryEvent) -> float:
    outcome = event.metadata.get("outcome")
    if outcome == "success":
        return 1.0
    if outcome == "failure":
        # failures stay above signal-free events: errors are learning signals
        return 0.25
    return 0.0


def composite_importance(factors: dict[str, float],
                         weights: SignalWeights) -> tuple[float, dict[str, float]]:
    """Weighted sum of the mode's factors. Returns (composite, breakdown)
    where the breakdown carries every factor plus the composite itself."""
    missing = set(weights.weights) - set(factors)
    if missing:
        raise InvalidWeights(f"missing factors: {sorted(missing)}")
    composite = sum(weights.weights[k] * factors[k] for k in weights.weights)
    breakdown = {k: factors[k] for k in weights.weights}
    breakdown["composite"] = composite
    return composite, breakdown


def score_record(record: EpisodicRecord, now: datetime,
                 earlier: Sequence[EpisodicRecord],
                 prior_centroid: Optional[np.ndarray],
                 graph, config: StoreConfig,
                 weights: Optional[SignalWeights] = None
                 ) -> tuple[float, dict[str, float]]:
    """Five-factor score for one pending record against the current store."""
    weights = weights or SignalWeights()
    factors = {
        "recency": recency_factor(record.encoded_at, now, config.lambda_decay),
        "frequency": frequency_factor(record, earlier, config.near_dedup_threshold),
        "surprise": surprise_factor(record.embedding, prior_centroid),
        "entity_salience": entity_salience_factor(record.entities, graph),
        "outcome": outcome_factor(record.event),
    }
    composite, breakdown = composite_importance(factors, weights)
    composite = apply_authority_downweight(composite, record.event,
                                           factors["surprise"], config)
    breakdown["composite"] = composite
    return composite, breakdown


def apply_authority_downweight(composite: float, event: MemoryEvent,
                               surprise: float, config: StoreConfig) -> float:
    """Downweight automated low-authority events, but keep high-surprise
    alerts intact."""
    if event.actor != "automation" or surprise > 0.8:
        return composite
    try:
        authority = float(event.metadata.get("authority", "0"))
    except ValueError:
        authority = 0.0
    if authority < 0.5:
        return composite * config.authority_downweight
    return composite


def content_length_signal(text: str, p95_length: float) -> float:
    if p95_length <= 0:
        return 0.0
    return min(len(text) / p95_length, 1.0)


def turn_position_signal(index: int, session_length: int) -> float:
    if session_length <= 0:
        return 0.0
    return 1.0 - index / session_length


def calibrated_four_score(text: str, index: int, session_length: int,
                          embedding: np.ndarray,
                          prior_centroid: Optional[np.ndarray],
                          p95_length: float,
                          encoded_at: datetime, now: datetime, lam: float,
                          weights: Optional[SignalWeights] = None
                          ) -> tuple[float, dict[str, float]]:
    weights = weights or SignalWeights.calibrated_four()
    factors = {
        "content_length": content_length_signal(text, p95_length),
        "turn_position": turn_position_signal(index, session_length),
        "surprise": surprise_factor(embedding, prior_centroid),
        "recency": recency_factor(encoded_at, now, lam),
    }
    return composite_importance(factors, weights)


@dataclass
class Classification:
    promote: list[EpisodicRecord]
    retain: list[EpisodicRecord]
    prune: list[EpisodicRecord]


def classify(records: Sequence[EpisodicRecord],
             promote_fraction: float = 0.20,
             prune_fraction: float = 0.20) -> Classification:
    """Partition scored records: top ceil(p*n) promote, bottom floor(q*n)
    prune, rest retain. Ties break deterministically: higher composite first,
    then older encoded_at, then id."""
    if not records:
        raise EmptyBatch("cannot classify an empty batch")
    ranked = sorted(records,
                    key=lambda r: (-r.importance, r.encoded_at, r.id))
    n = len(ranked)
    n_promote = math.ceil(promote_fraction * n)
    n_prune = math.floor(prune_fraction * n)
    return Classification(
        promote=ranked[:n_promote],
        retain=ranked[n_promote:n - n_prune],
        prune=ranked[n - n_prune:],
    )
