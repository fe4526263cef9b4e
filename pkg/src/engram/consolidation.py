"""Batch consolidation pipeline.

Order of stages per batch: temporal validation -> scoring -> classification
-> exact dedup -> near dedup -> (aggressive only: cluster + merge) -> gist
-> promotion. Pruned records enter graceful degradation rather than being
hard-deleted. The whole batch is transactional: on any stage failure the
store is restored to its pre-batch state.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .graph import KnowledgeGraph, SemanticMemory
from .model import (
    STATE_PENDING,
    STATE_PROMOTED,
    STATE_RETAINED,
    STATE_TOMBSTONE,
    TIER_WARM,
    EpisodicRecord,
    FidelityLevel,
    MemoryEvent,
    StoreConfig,
    estimate_tokens,
    hours_between,
)
from .scoring import SignalWeights, classify, score_record
from .store import MemoryStore

log = logging.getLogger("engram.consolidation")

MODE_DEDUP = "dedup"
MODE_DEDUP_ADAPTIVE = "dedup-adaptive"
MODE_AGGRESSIVE = "aggressive"
MODE_NONE = "none"

REASON_OUT_OF_ORDER = "out_of_order"
REASON_DUPLICATE = "duplicate"
REASON_CAUSAL_INVERSION = "causal_inversion"


@dataclass
class ConsolidationReport:
    batch_id: str
    input_count: int = 0
    quarantined: int = 0
    exact_dups_removed: int = 0
    near_dups_removed: int = 0
    clusters_formed: int = 0
    promoted: int = 0
    pruned: int = 0
    retained: int = 0
    removed_existing: int = 0
    store_size_before: int = 0
    store_size_after: int = 0
    tokens_before: int = 0
    tokens_after: int = 0
    quarantine_dropped: list[str] = field(default_factory=list)

    @property
    def removed(self) -> int:
        return self.exact_dups_removed + self.near_dups_removed

    def accounting_holds(self) -> bool:
        return self.input_count == (self.quarantined + self.removed +
                                    self.promoted + self.pruned + self.retained)

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["removed"] = self.removed
        return d


def validate_temporal(events: Sequence[MemoryEvent],
                      watermark: Optional[datetime],
                      admitted_ids: set[str],
                      skew_tolerance_min: float = 5.0
                      ) -> tuple[list[MemoryEvent], list[tuple[MemoryEvent, str]],
                                 Optional[datetime]]:
    """Classify events (in arrival order) as admitted or anomalous.

    Anomalies are data, not errors: out-of-order arrivals beyond the skew
    tolerance, ids already admitted, and events citing causes that have not
    been admitted yet. Returns (admitted, [(event, reason)], new_watermark);
    `admitted_ids` is updated in place.
    """
    admitted: list[MemoryEvent] = []
    anomalous: list[tuple[MemoryEvent, str]] = []
    skew_h = skew_tolerance_min / 60.0
    for event in events:
        if event.id in admitted_ids:
            anomalous.append((event, REASON_DUPLICATE))
            continue
        if watermark is not None and hours_between(event.timestamp, watermark) > skew_h:
            anomalous.append((event, REASON_OUT_OF_ORDER))
            continue
        if any(c not in admitted_ids for c in event.causes):
            anomalous.append((event, REASON_CAUSAL_INVERSION))
            continue
        admitted_ids.add(event.id)
        admitted.append(event)
        if watermark is None or event.timestamp > watermark:
            watermark = event.timestamp
    return admitted, anomalous, watermark


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def exact_dedup(batch: Sequence[EpisodicRecord]
                ) -> tuple[list[EpisodicRecord], list[EpisodicRecord]]:
    """Collapse identical-content records onto the earliest copy. The
    survivor absorbs the removed copies' ids and access counts."""
    ordered = sorted(batch, key=lambda r: (r.event.timestamp, r.id))
    by_hash: dict[str, EpisodicRecord] = {}
    removed: list[EpisodicRecord] = []
    for rec in ordered:
        h = content_hash(rec.content)
        survivor = by_hash.get(h)
        if survivor is None:
            by_hash[h] = rec
        else:
            merged_sources = tuple(dict.fromkeys(survivor.source_ids + rec.source_ids))
            by_hash[h] = replace(survivor,
                                 access_count=survivor.access_count + 1,
                                 source_ids=merged_sources)
            removed.append(rec)
    id_order = {r.id: i for i, r in enumerate(ordered)}
    survivors = sorted(by_hash.values(), key=lambda r: id_order[r.id])
    return survivors, removed


def near_dedup(batch: Sequence[EpisodicRecord], threshold: float
               ) -> tuple[list[EpisodicRecord], list[EpisodicRecord]]:
    """Greedy near-duplicate removal in timestamp order: a record is dropped
    when its cosine similarity to any earlier survivor reaches the
    threshold; the survivor merges source ids and keeps max importance."""
    ordered = sorted(batch, key=lambda r: (r.event.timestamp, r.id))
    survivors: list[EpisodicRecord] = []
    removed: list[EpisodicRecord] = []
    matrix: list[np.ndarray] = []
    for rec in ordered:
        hit = None
        if matrix:
            sims = np.stack(matrix) @ rec.embedding
            idx = int(np.argmax(sims))
            if float(sims[idx]) >= threshold:
                hit = idx
        if hit is None:
            survivors.append(rec)
            matrix.append(rec.embedding)
        else:
            survivor = survivors[hit]
            merged_sources = tuple(dict.fromkeys(survivor.source_ids + rec.source_ids))
            survivors[hit] = replace(
                survivor,
                source_ids=merged_sources,
                importance=max(survivor.importance, rec.importance),
            )
            removed.append(rec)
    return survivors, removed


def cluster(batch: Sequence[EpisodicRecord], distance: float
            ) -> list[list[EpisodicRecord]]:
    """Average-linkage agglomerative clustering on cosine distance.

    Merging stops when the minimum inter-cluster distance exceeds the
    configured cutoff. Ties pick the pair whose smallest member ids compare
    lowest, so the result is order-independent and deterministic.
    """
    records = sorted(batch, key=lambda r: r.id)
    n = len(records)
    if n == 0:
        return []
    if n == 1:
        return [[records[0]]]
    # per-pair dots + fsum averaging: correctly rounded and independent of
    # summation order, so an independent reference computes identical values
    base = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        base[i, i] = 0.0
        for j in range(i + 1, n):
            d = 1.0 - float(np.dot(records[i].embedding, records[j].embedding))
            base[i, j] = d
            base[j, i] = d
    clusters: dict[str, list[int]] = {r.id: [i] for i, r in enumerate(records)}

    def pair_distance(a: str, b: str) -> float:
        total = math.fsum(base[i, j] for i in clusters[a] for j in clusters[b])
        return total / (len(clusters[a]) * len(clusters[b]))

    dist: dict[tuple[str, str], float] = {}
    keys = sorted(clusters)
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            dist[(keys[i], keys[j])] = pair_distance(keys[i], keys[j])

    while len(clusters) > 1:
        best = min(dist.items(), key=lambda kv: (kv[1], kv[0]))
        (a, b), d = best
        if d > distance:
            break
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
        for key in list(dist):
            if b in key:
                del dist[key]
        for other in clusters:
            if other == a:
                continue
            pair = (a, other) if a < other else (other, a)
            dist[pair] = pair_distance(a, other)
    out = []
    for key in sorted(clusters):
        out.append([records[i] for i in sorted(clusters[key])])
    return out


@dataclass
class GistDraft:
    gist: str
    source_ids: frozenset[str]
    entities: tuple[str, ...]
    member_ids: tuple[str, ...]


def make_gist(cluster_records: Sequence[EpisodicRecord],
              config: StoreConfig,
              summarizer: Optional[Callable[[Sequence[EpisodicRecord]], str]] = None
              ) -> GistDraft:
    """Build a semantic gist draft from a cluster: by default, the top-m
    highest-importance members' contents concatenated and truncated to the
    gist token cap. A failing external summarizer falls back to the
    default."""
    if not cluster_records:
        raise ValueError("cluster must be non-empty")
    text: Optional[str] = None
    if summarizer is not None:
        try:
            text = summarizer(cluster_records)
        except Exception:
            log.warning("summarizer failed; falling back to default gist")
            text = None
    if text is None:
        top = sorted(cluster_records,
                     key=lambda r: (-r.importance, r.encoded_at, r.id))
        top = top[:config.gist_top_m]
        text = "\n".join(r.content for r in top)
    text = text[:config.gist_max_tokens * 4]
    source_ids: set[str] = set()
    entities: dict[str, None] = {}
    for rec in cluster_records:
        source_ids.update(rec.source_ids)
        for name in rec.entities:
            entities.setdefault(name, None)
    return GistDraft(gist=text, source_ids=frozenset(source_ids),
                     entities=tuple(entities),
                     member_ids=tuple(r.id for r in cluster_records))


def promote(draft: GistDraft, graph: KnowledgeGraph, embedder,
            now: datetime) -> SemanticMemory:
    """Insert the gist as a silent semantic memory (maturation clock starts
    now). Idempotent on the source-id set."""
    embedding = embedder.embed(draft.gist)
    return graph.insert_memory(draft.gist, embedding, draft.source_ids,
                               draft.entities, now)


def _revalidate_quarantine(store: MemoryStore, now: datetime,
                           report: ConsolidationReport) -> list[MemoryEvent]:
    """One re-validation attempt for expired quarantine entries: causal
    inversions whose causes have since been admitted are re-admitted;
    everything else is dropped with a tombstone log line."""
    readmitted: list[MemoryEvent] = []
    for qid in sorted(store.quarantine):
        entry = store.quarantine[qid]
        if entry.expires_at > now:
            continue
        del store.quarantine[qid]
        resolved = (entry.reason == REASON_CAUSAL_INVERSION and
                    all(c in store.admitted_ids for c in entry.event.causes))
        if resolved:
            readmitted.append(entry.event)
        else:
            log.info("quarantine drop (tombstone): %s reason=%s", qid, entry.reason)
            report.quarantine_dropped.append(qid)
    return readmitted


def run_consolidation(store: MemoryStore, now: datetime,
                      mode: str = MODE_DEDUP,
                      weights: Optional[SignalWeights] = None,
                      summarizer=None) -> ConsolidationReport:
    if mode not in (MODE_DEDUP, MODE_DEDUP_ADAPTIVE, MODE_AGGRESSIVE, MODE_NONE):
        raise ValueError(f"unknown consolidation mode {mode!r}")
    config = store.config
    with store.lock:
        chk = store._checkpoint()
        try:
            report = ConsolidationReport(batch_id=store.next_batch_id())
            report.store_size_before = store.active_count()
            report.tokens_before = store.active_tokens()

            # 1. quarantine re-validation, then temporal validation in
            # arrival order
            readmitted = _revalidate_quarantine(store, now, report)
            for event in readmitted:
                if event.id not in store.records:
                    store.ingest(event)
                    store.total_ingested -= 1  # re-admission, not new input
                store.admitted_ids.add(event.id)
            pending = [r for r in store.records.values()
                       if r.state == STATE_PENDING]
            fresh_events = [r.event for r in pending
                            if r.id not in store.admitted_ids]
            report.input_count = len(fresh_events) + len(readmitted)
            admitted_events, anomalous, store.watermark = validate_temporal(
                fresh_events, store.watermark, store.admitted_ids,
                config.skew_tolerance_min)
            for event, reason in anomalous:
                store.quarantine_event(event, reason, now)
            report.quarantined = len(anomalous)

            batch = [store.records[e.id] for e in admitted_events]
            batch.extend(store.records[e.id] for e in readmitted)
            batch.sort(key=lambda r: (r.event.timestamp, r.id))

            if mode == MODE_NONE:
                # keep-everything baseline: admit and retain, nothing else
                for rec in batch:
                    store.replace(replace(rec, state=STATE_RETAINED,
                                          tier=TIER_WARM,
                                          ttl_expires_at=now + _warm_ttl(config)))
                report.retained = len(batch)
                report.store_size_after = store.active_count()
                report.tokens_after = store.active_tokens()
                return report

            # 2. scoring (running-centroid surprise prior, single writer)
            existing = [r for r in store.records.values()
                        if r.state in (STATE_RETAINED, STATE_PROMOTED)]
            for rec in batch:
                earlier = [r for r in existing
                           if (r.encoded_at, r.id) < (rec.encoded_at, rec.id)]
                earlier += [r for r in batch
                            if (r.encoded_at, r.id) < (rec.encoded_at, rec.id)]
                composite, breakdown = score_record(
                    rec, now, earlier, store.centroid(), store.graph, config,
                    weights)
                rec = replace(rec, importance=composite, score_breakdown=breakdown)
                store.replace(rec)
                store.add_to_centroid(rec.embedding)
            batch = [store.records[r.id] for r in batch]

            # 3. classification (before dedup, per pipeline order)
            bucket: dict[str, str] = {}
            if batch:
                cls = classify(batch, config.promote_fraction, config.prune_fraction)
                for r in cls.promote:
                    bucket[r.id] = "promote"
                for r in cls.retain:
                    bucket[r.id] = "retain"
                for r in cls.prune:
                    bucket[r.id] = "prune"

            # 4. dedup against existing active store content plus the batch
            batch_ids = {r.id for r in batch}
            existing = [r for r in store.records.values()
                        if r.state in (STATE_RETAINED, STATE_PROMOTED)
                        and r.id not in batch_ids]
            combined = existing + batch
            survivors, exact_removed = exact_dedup(combined)
            near_removed: list[EpisodicRecord] = []
            survivors, near_removed = near_dedup(survivors, config.near_dedup_threshold)
            exact_removed_ids = {r.id for r in exact_removed}
            for rec in exact_removed + near_removed:
                if rec.id in batch_ids:
                    if rec.id in exact_removed_ids:
                        report.exact_dups_removed += 1
                    else:
                        report.near_dups_removed += 1
                else:
                    report.removed_existing += 1
                store.records.pop(rec.id, None)
            for rec in survivors:
                store.replace(rec)
            batch_survivors = [store.records[r.id] for r in survivors
                               if r.id in batch_ids]

            # 5. aggressive mode: cluster surviving batch and merge
            merged_member_ids: set[str] = set()
            gist_drafts: list[GistDraft] = []
            if mode == MODE_AGGRESSIVE and batch_survivors:
                groups = cluster(batch_survivors, config.cluster_distance)
                report.clusters_formed = sum(1 for g in groups if len(g) > 1)
                for group in groups:
                    if len(group) > 1:
                        gist_drafts.append(make_gist(group, config, summarizer))
                        merged_member_ids.update(r.id for r in group)

            # 6. apply classification / gists / promotion
            warm_ttl = now + _warm_ttl(config)
            for rec in batch_survivors:
                if rec.id in merged_member_ids:
                    continue
                b = bucket.get(rec.id, "retain")
                if b == "promote":
                    gist_drafts.append(make_gist([rec], config, summarizer))
                    store.replace(replace(rec, state=STATE_PROMOTED,
                                          tier=TIER_WARM, ttl_expires_at=warm_ttl))
                    report.promoted += 1
                elif b == "prune":
                    from .forgetting import degrade
                    pruned = replace(rec, state=STATE_RETAINED, tier=TIER_WARM,
                                     ttl_expires_at=warm_ttl)
                    store.replace(degrade(pruned, now))
                    report.pruned += 1
                else:
                    store.replace(replace(rec, state=STATE_RETAINED,
                                          tier=TIER_WARM, ttl_expires_at=warm_ttl))
                    report.retained += 1
            # merged cluster members fold into their gist: counted promoted,
            # episodic copies become tombstones
            for rec_id in sorted(merged_member_ids):
                rec = store.records[rec_id]
                store.replace(replace(rec.with_content(""), state=STATE_TOMBSTONE,
                                      fidelity=FidelityLevel.L5))
                report.promoted += 1

            for draft in gist_drafts:
                promote(draft, store.graph, store.embedder, now)

            report.store_size_after = store.active_count()
            report.tokens_after = store.active_tokens()
            return report
        except Exception:
            store._restore(chk)
            raise


def _warm_ttl(config: StoreConfig):
    from datetime import timedelta

    return timedelta(hours=config.warm_ttl_hours)
