"""Core data types: events, episodic records, fidelity ladder, store config.

All timestamps are timezone-aware UTC datetimes. Records are treated as
immutable values by the lifecycle stages; mutation is replace-by-id in the
store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import IntEnum
from typing import Any, Optional

import numpy as np

ACTORS = ("user", "agent", "system", "automation")


def utc(ts: str) -> datetime:
    """Parse an RFC3339 timestamp into an aware UTC datetime."""
    dt = datetime.fromisoformat(ts.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def rfc3339(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def hours_between(earlier: datetime, later: datetime) -> float:
    return (later - earlier).total_seconds() / 3600.0


def estimate_tokens(content: str) -> int:
    """Rough token count: ceil(chars / 4). Empty text counts as zero."""
    return -(-len(content) // 4)


class FidelityLevel(IntEnum):
    L0 = 0
    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4
    L5 = 5

    @property
    def retained_fraction(self) -> float:
        return _RETAINED_FRACTION[self]

    def next_level(self) -> "FidelityLevel":
        return FidelityLevel(min(self.value + 1, FidelityLevel.L5.value))


_RETAINED_FRACTION = {
    FidelityLevel.L0: 1.00,
    FidelityLevel.L1: 0.75,
    FidelityLevel.L2: 0.50,
    FidelityLevel.L3: 0.25,
    FidelityLevel.L4: 0.10,
    FidelityLevel.L5: 0.00,
}

# Record lifecycle is a one-way lattice:
# pending -> {retained, promoted, quarantined} -> tombstone,
# with quarantined -> pending allowed on re-admission.
STATE_PENDING = "pending"
STATE_RETAINED = "retained"
STATE_PROMOTED = "promoted"
STATE_QUARANTINED = "quarantined"
STATE_TOMBSTONE = "tombstone"

TIER_HOT = "hot"
TIER_WARM = "warm"


@dataclass(frozen=True)
class MemoryEvent:
    id: str
    timestamp: datetime
    session_id: str
    actor: str
    kind: str
    content: str
    metadata: dict[str, str] = field(default_factory=dict)
    causes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ValueError("event id must be non-empty")
        if self.actor not in ACTORS:
            raise ValueError(f"unknown actor {self.actor!r}")
        object.__setattr__(self, "causes", tuple(self.causes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "ts": rfc3339(self.timestamp),
            "session_id": self.session_id,
            "actor": self.actor,
            "kind": self.kind,
            "content": self.content,
            "metadata": dict(self.metadata),
            "causes": list(self.causes),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MemoryEvent":
        return cls(
            id=d["id"],
            timestamp=utc(d["ts"]),
            session_id=d.get("session_id", ""),
            actor=d.get("actor", "user"),
            kind=d.get("kind", "event"),
            content=d.get("content", ""),
            metadata=dict(d.get("metadata") or {}),
            causes=tuple(d.get("causes") or ()),
        )


@dataclass(eq=False)
class EpisodicRecord:
    event: MemoryEvent
    embedding: np.ndarray
    importance: float = 0.0
    score_breakdown: dict[str, float] = field(default_factory=dict)
    fidelity: FidelityLevel = FidelityLevel.L0
    tier: str = TIER_HOT
    encoded_at: datetime = None  # type: ignore[assignment]
    last_accessed: datetime = None  # type: ignore[assignment]
    access_count: int = 0
    ttl_expires_at: datetime = None  # type: ignore[assignment]
    state: str = STATE_PENDING
    entities: tuple[str, ...] = ()
    source_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.encoded_at is None:
            self.encoded_at = self.event.timestamp
        if self.last_accessed is None:
            self.last_accessed = self.encoded_at
        if self.ttl_expires_at is None:
            self.ttl_expires_at = self.encoded_at + timedelta(hours=24)
        if not self.source_ids:
            self.source_ids = (self.event.id,)

    @property
    def id(self) -> str:
        return self.event.id

    @property
    def content(self) -> str:
        return self.event.content

    def with_content(self, content: str) -> "EpisodicRecord":
        return replace(self, event=replace(self.event, content=content))

    def is_active(self) -> bool:
        return self.state != STATE_TOMBSTONE

    def to_dict(self) -> dict[str, Any]:
        return {
            "event": self.event.to_dict(),
            "embedding": [float(x) for x in self.embedding],
            "importance": self.importance,
            "score_breakdown": dict(self.score_breakdown),
            "fidelity": int(self.fidelity),
            "tier": self.tier,
            "encoded_at": rfc3339(self.encoded_at),
            "last_accessed": rfc3339(self.last_accessed),
            "access_count": self.access_count,
            "ttl_expires_at": rfc3339(self.ttl_expires_at),
            "state": self.state,
            "entities": list(self.entities),
            "source_ids": list(self.source_ids),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EpisodicRecord":
        return cls(
            event=MemoryEvent.from_dict(d["event"]),
            embedding=np.array(d["embedding"], dtype=np.float64),
            importance=d["importance"],
            score_breakdown=dict(d["score_breakdown"]),
            fidelity=FidelityLevel(d["fidelity"]),
            tier=d["tier"],
            encoded_at=utc(d["encoded_at"]),
            last_accessed=utc(d["last_accessed"]),
            access_count=d["access_count"],
            ttl_expires_at=utc(d["ttl_expires_at"]),
            state=d["state"],
            entities=tuple(d["entities"]),
            source_ids=tuple(d["source_ids"]),
        )


@dataclass
class StoreConfig:
    """All tunables in one place; thresholds default to the shipped
    calibration values, overridable from a CalibrationProfile."""

    lambda_decay: float = 0.001            # per hour
    near_dedup_threshold: float = 0.559
    cluster_distance: float = 0.404
    interference_threshold: float = 0.542
    maturation_half_life_h: float = 168.0
    maturation_slope: float = 48.0
    lability_window_min: float = 60.0
    quarantine_ttl_min: float = 15.0
    consolidate_every_n_sessions: int = 1
    retrieval_k: int = 10
    token_budget: Optional[int] = None
    maturation_enabled: bool = True
    promote_fraction: float = 0.20
    retain_fraction: float = 0.60
    prune_fraction: float = 0.20

    # Artifact-level knobs not named by the threshold rules.
    embed_dimension: int = 256
    embed_seed: int = 0
    hot_ttl_hours: float = 24.0
    warm_ttl_hours: float = 720.0          # 30 days
    skew_tolerance_min: float = 5.0
    gist_max_tokens: int = 128
    gist_top_m: int = 3
    retro_weight: float = 0.6
    pro_weight: float = 0.4
    importance_floor: float = 0.5
    forget_priority_floor: float = 0.0
    priming_gamma: float = 0.1
    recency_boost_beta: float = 0.2
    recency_boost_lambda: float = 0.01
    reinforce_step: float = 0.05
    blend_confidence_w: float = 0.5
    blend_severity_w: float = 0.3
    blend_recency_w: float = 0.2
    authority_downweight: float = 0.5
    importance_filter: float = 0.0
    max_hops: int = 2
    # Age a record must reach before it degrades one more level, per current
    # level, in hours (7d / 14d / 30d / 60d / 90d).
    degrade_age_hours: tuple[float, ...] = (168.0, 336.0, 720.0, 1440.0, 2160.0)

    def __post_init__(self):
        fracs = self.promote_fraction + self.retain_fraction + self.prune_fraction
        if abs(fracs - 1.0) > 1e-9:
            raise ValueError("classification fractions must sum to 1.0")
        if self.maturation_half_life_h <= 0:
            raise ValueError("maturation half-life must be positive")
        for name in ("near_dedup_threshold", "cluster_distance", "interference_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        d = {}
        for k, v in self.__dict__.items():
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "StoreConfig":
        kwargs = dict(d)
        if "degrade_age_hours" in kwargs:
            kwargs["degrade_age_hours"] = tuple(kwargs["degrade_age_hours"])
        return cls(**kwargs)


def decayed_importance(importance: float, encoded_at: datetime, now: datetime,
                       lam: float) -> float:
    """Exponential importance decay; does not mutate the stored base value."""
    from .errors import NegativeElapsed
    dt = hours_between(encoded_at, now)
    if dt < 0:
        raise NegativeElapsed(f"now precedes encoding by {-dt:.3f}h")
    return importance * math.exp(-lam * dt)
