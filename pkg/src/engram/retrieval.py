"""Hybrid retrieval across hot/warm episodic tiers and the semantic graph,
plus post-retrieval reconsolidation.

Ranking: final = base_sim * (1 + beta * exp(-lambda_r * age_h)) * priming.
Exact score ties break by tier priority (hot > warm > graph), then newer
timestamp, then id. A semantic gist is dropped from results whenever one of
its source episodic records is already present.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Any, Optional

import numpy as np

from .embedding import normalize
from .errors import LabilityExpired
from .graph import RETRIEVAL_THRESHOLD, SemanticMemory
from .model import (
    STATE_TOMBSTONE,
    TIER_HOT,
    TIER_WARM,
    EpisodicRecord,
    decayed_importance,
    hours_between,
    rfc3339,
)
from .store import MemoryStore

log = logging.getLogger("engram.retrieval")

TIER_GRAPH = "graph"
_TIER_PRIORITY = {TIER_HOT: 0, TIER_WARM: 1, TIER_GRAPH: 2}


@dataclass
class Hit:
    memory_id: str
    tier: str
    base_sim: float
    recency_boost: float = 1.0
    priming_boost: float = 1.0
    final_score: float = 0.0
    timestamp: datetime = None  # type: ignore[assignment]
    content: str = ""
    source_ids: tuple[str, ...] = ()
    hop_distance: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "memory_id": self.memory_id,
            "tier": self.tier,
            "base_sim": self.base_sim,
            "recency_boost": self.recency_boost,
            "priming_boost": self.priming_boost,
            "final_score": self.final_score,
            "timestamp": rfc3339(self.timestamp),
            "content": self.content,
            "source_ids": list(self.source_ids),
            "hop_distance": self.hop_distance,
        }


@dataclass
class RetrievalResult:
    query: str
    k: int
    as_of: datetime
    hits: list[Hit] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"query": self.query, "k": self.k, "as_of": rfc3339(self.as_of),
                "hits": [h.to_dict() for h in self.hits]}


@dataclass
class LabilityHandle:
    memory_id: str
    opened_at: datetime
    expires_at: datetime


def _rank_key(hit: Hit):
    return (-hit.final_score, _TIER_PRIORITY[hit.tier],
            -hit.timestamp.timestamp(), hit.memory_id)


def episodic_search(store: MemoryStore, query: str, k: int,
                    now: datetime,
                    time_range: Optional[tuple[datetime, datetime]] = None,
                    session_id: Optional[str] = None,
                    tier: Optional[str] = None,
                    importance_filter: Optional[float] = None) -> list[Hit]:
    """Exact cosine scan over non-tombstone episodic records passing the
    temporal/session filters, top-k by similarity."""
    if importance_filter is None:
        importance_filter = store.config.importance_filter
    qvec = store.embedder.embed(query)
    hits: list[Hit] = []
    for rec in store.records.values():
        if rec.state == STATE_TOMBSTONE:
            continue
        if tier is not None and rec.tier != tier:
            continue
        if session_id is not None and rec.event.session_id != session_id:
            continue
        ts = rec.event.timestamp
        if time_range is not None and not (time_range[0] <= ts <= time_range[1]):
            continue
        decayed = decayed_importance(rec.importance, rec.encoded_at, now,
                                     store.config.lambda_decay)
        if decayed < importance_filter:
            continue
        sim = float(np.dot(qvec, rec.embedding))
        hits.append(Hit(memory_id=rec.id, tier=rec.tier, base_sim=sim,
                        final_score=sim, timestamp=ts, content=rec.content,
                        source_ids=rec.source_ids))
    hits.sort(key=_rank_key)
    return hits[:k]


def semantic_search(store: MemoryStore, query: str, k: int,
                    now: datetime) -> list[Hit]:
    """Cosine scan over semantic memories that have matured past the
    retrieval threshold (all of them when maturation is disabled)."""
    qvec = store.embedder.embed(query)
    hits: list[Hit] = []
    for mem in store.graph.memories.values():
        if not mem.is_explicitly_retrievable(now, store.config):
            continue
        sim = float(np.dot(qvec, mem.embedding))
        hits.append(Hit(memory_id=mem.id, tier=TIER_GRAPH, base_sim=sim,
                        final_score=sim, timestamp=mem.created_at,
                        content=mem.gist, source_ids=tuple(sorted(mem.source_ids))))
    hits.sort(key=_rank_key)
    return hits[:k]


def hybrid_retrieve(store: MemoryStore, query: str, k: Optional[int] = None,
                    now: Optional[datetime] = None,
                    session_id: Optional[str] = None) -> RetrievalResult:
    """Hot-tier session hits, then warm episodic hits, then graph traversal
    seeded by entities of the top episodic hits; merged, deduplicated by
    source-id overlap, recency-boosted and primed, truncated to k."""
    config = store.config
    if k is None:
        k = config.retrieval_k
    if now is None:
        now = store.watermark or datetime.now().astimezone()
    hot = episodic_search(store, query, k, now, tier=TIER_HOT,
                          session_id=session_id)
    warm = episodic_search(store, query, k, now, tier=TIER_WARM)

    episodic_hits: list[Hit] = []
    seen_ids: set[str] = set()
    for hit in hot + warm:
        if hit.memory_id not in seen_ids:
            seen_ids.add(hit.memory_id)
            episodic_hits.append(hit)

    # graph pathway seeded by entities of the strongest episodic hits
    seed_entities: dict[str, None] = {}
    for hit in episodic_hits[:k]:
        rec = store.records.get(hit.memory_id)
        if rec is not None:
            for name in rec.entities:
                seed_entities.setdefault(name, None)
    qvec = store.embedder.embed(query)
    graph_hits: list[Hit] = []
    silent_by_entity: dict[str, float] = {}
    if seed_entities:
        for mem, hops in store.graph.traverse(seed_entities, config.max_hops):
            a = mem.activation(now, config)
            if a >= RETRIEVAL_THRESHOLD or not config.maturation_enabled:
                sim = float(np.dot(qvec, mem.embedding))
                graph_hits.append(Hit(memory_id=mem.id, tier=TIER_GRAPH,
                                      base_sim=sim, final_score=sim,
                                      timestamp=mem.created_at, content=mem.gist,
                                      source_ids=tuple(sorted(mem.source_ids)),
                                      hop_distance=hops))
            else:
                # silent memories prime episodic results sharing an entity
                for name in mem.entities:
                    key = name.casefold()
                    silent_by_entity[key] = max(silent_by_entity.get(key, 0.0), a)

    # merge + dedupe: an episodic copy beats its own semantic gist
    covered_sources: set[str] = set()
    for hit in episodic_hits:
        covered_sources.update(hit.source_ids)
        covered_sources.add(hit.memory_id)
    merged = list(episodic_hits)
    for hit in graph_hits:
        if any(src in covered_sources for src in hit.source_ids):
            continue
        merged.append(hit)
        covered_sources.update(hit.source_ids)

    for hit in merged:
        age_h = max(hours_between(hit.timestamp, now), 0.0)
        hit.recency_boost = 1.0 + config.recency_boost_beta * math.exp(
            -config.recency_boost_lambda * age_h)
        if hit.tier != TIER_GRAPH and silent_by_entity:
            rec = store.records.get(hit.memory_id)
            if rec is not None:
                best = max((silent_by_entity.get(n.casefold(), 0.0)
                            for n in rec.entities), default=0.0)
                if best > 0.0:
                    hit.priming_boost = 1.0 + config.priming_gamma * best
        hit.final_score = hit.base_sim * hit.recency_boost * hit.priming_boost

    merged.sort(key=_rank_key)
    return RetrievalResult(query=query, k=k, as_of=now, hits=merged[:k])


def open_lability(store: MemoryStore, memory_id: str,
                  now: datetime) -> LabilityHandle:
    """Mark a retrieved memory labile for the configured window and record
    the access."""
    window = timedelta(minutes=store.config.lability_window_min)
    rec = store.records.get(memory_id)
    if rec is not None:
        store.replace(replace(rec, access_count=rec.access_count + 1,
                              last_accessed=now))
    else:
        mem = store.graph.memories.get(memory_id)
        if mem is None:
            raise KeyError(memory_id)
        mem.access_count += 1
    expires = now + window
    store.labile_until[memory_id] = expires
    return LabilityHandle(memory_id=memory_id, opened_at=now, expires_at=expires)


def blend_strength(confidence: float, severity: float,
                   recency_factor: float, config) -> float:
    alpha = (config.blend_confidence_w * confidence +
             config.blend_severity_w * severity +
             config.blend_recency_w * (1.0 - recency_factor))
    return min(max(alpha, 0.0), 1.0)


def reconsolidate(store: MemoryStore, handle: LabilityHandle,
                  new_content: str, confidence: float,
                  now: datetime):
    """Blend new information into a labile memory.

    Contradiction severity is the embedding distance between old and new
    content; blend strength alpha weighs confidence, severity, and how stale
    the memory is. alpha > 0.5 replaces the content outright, otherwise the
    new content is appended as an amendment. Outside the window this is a
    signaled no-op.
    """
    if now >= handle.expires_at:
        raise LabilityExpired(handle.memory_id)
    config = store.config
    new_vec = store.embedder.embed(new_content)

    rec = store.records.get(handle.memory_id)
    mem: Optional[SemanticMemory] = None
    if rec is not None:
        old_vec, old_content, encoded_at = rec.embedding, rec.content, rec.encoded_at
    else:
        mem = store.graph.memories.get(handle.memory_id)
        if mem is None:
            raise KeyError(handle.memory_id)
        old_vec, old_content, encoded_at = mem.embedding, mem.gist, mem.created_at

    severity = min(max(1.0 - float(np.dot(new_vec, old_vec)), 0.0), 1.0)
    if severity < 1e-9:  # identical content up to float residue
        severity = 0.0
    recency = math.exp(-config.lambda_decay * max(hours_between(encoded_at, now), 0.0))
    alpha = blend_strength(confidence, severity, recency, config)
    log.info("reconsolidate %s alpha=%.4f confidence=%.3f severity=%.3f recency=%.3f",
             handle.memory_id, alpha, confidence, severity, recency)
    if alpha == 0.0:
        return rec if rec is not None else mem

    blended = normalize((1.0 - alpha) * old_vec + alpha * new_vec)
    if alpha > 0.5:
        content = new_content
    else:
        content = old_content + "\n[amendment] " + new_content
    if rec is not None:
        updated = replace(rec.with_content(content), embedding=blended)
        store.replace(updated)
        return updated
    mem.gist = content
    mem.embedding = blended
    store.graph.replace_memory(mem)
    return mem


def reinforce(store: MemoryStore, memory_id: str, outcome: str) -> float:
    """Outcome feedback: success nudges importance up (clamped at 1);
    failure leaves the score but tags the record as an error signal so the
    interference path never deletes it."""
    rec = store.records.get(memory_id)
    if rec is None:
        raise KeyError(memory_id)
    if outcome == "success":
        updated = replace(rec, importance=min(1.0, rec.importance +
                                              store.config.reinforce_step))
        store.replace(updated)
        return updated.importance
    if outcome == "failure":
        metadata = dict(rec.event.metadata)
        metadata["error_signal"] = "true"
        updated = replace(rec, event=replace(rec.event, metadata=metadata))
        store.replace(updated)
        return updated.importance
    raise ValueError(f"unknown outcome {outcome!r}")
