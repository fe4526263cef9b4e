"""Tiered memory store: ingest, quarantine bookkeeping, lability tracking,
and versioned snapshots.

Batch lifecycle jobs take the store's writer lock and see a consistent
state; records themselves are treated as immutable values and replaced by
id.
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Any, Iterable, Optional

import numpy as np

from .embedding import HashEmbedder, normalize
from .errors import DuplicateId, EmbeddingFailure, SnapshotFormatError
from .graph import KnowledgeGraph, extract_entities
from .model import (
    STATE_PENDING,
    STATE_QUARANTINED,
    STATE_TOMBSTONE,
    TIER_HOT,
    EpisodicRecord,
    FidelityLevel,
    MemoryEvent,
    StoreConfig,
    estimate_tokens,
    rfc3339,
    utc,
)

SNAPSHOT_VERSION = 1


@dataclass
class QuarantineEntry:
    event: MemoryEvent
    reason: str  # out_of_order | duplicate | causal_inversion
    quarantined_at: datetime
    expires_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "event": self.event.to_dict(),
            "reason": self.reason,
            "quarantined_at": rfc3339(self.quarantined_at),
            "expires_at": rfc3339(self.expires_at),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QuarantineEntry":
        return cls(event=MemoryEvent.from_dict(d["event"]), reason=d["reason"],
                   quarantined_at=utc(d["quarantined_at"]),
                   expires_at=utc(d["expires_at"]))


class MemoryStore:
    def __init__(self, config: Optional[StoreConfig] = None, embedder=None):
        self.config = config or StoreConfig()
        self.embedder = embedder or HashEmbedder(self.config.embed_dimension,
                                                 self.config.embed_seed)
        self.records: dict[str, EpisodicRecord] = {}
        self.graph = KnowledgeGraph()
        self.quarantine: dict[str, QuarantineEntry] = {}
        self.admitted_ids: set[str] = set()
        self.watermark: Optional[datetime] = None
        # running sum of scored embeddings backing the surprise prior
        self.centroid_sum: Optional[np.ndarray] = None
        self.centroid_count: int = 0
        self.labile_until: dict[str, datetime] = {}
        self.total_ingested: int = 0
        self.batch_seq: int = 0
        self.calibration_profile: Optional[dict[str, Any]] = None
        self.lock = threading.RLock()

    # -- ingest -----------------------------------------------------------

    def ingest(self, event: MemoryEvent) -> EpisodicRecord:
        """Store a raw event in the hot tier as a pending L0 record."""
        with self.lock:
            if event.id in self.records or event.id in self.admitted_ids:
                raise DuplicateId(event.id)
            try:
                embedding = self.embedder.embed(event.content)
            except Exception as exc:
                raise EmbeddingFailure(str(exc)) from exc
            record = EpisodicRecord(
                event=event,
                embedding=embedding,
                tier=TIER_HOT,
                state=STATE_PENDING,
                fidelity=FidelityLevel.L0,
                encoded_at=event.timestamp,
                ttl_expires_at=event.timestamp + timedelta(hours=self.config.hot_ttl_hours),
                entities=extract_entities(event.content),
            )
            self.records[event.id] = record
            self.total_ingested += 1
            return record

    def ingest_jsonl(self, lines: Iterable[str]) -> list[EpisodicRecord]:
        out = []
        for line in lines:
            line = line.strip()
            if not line:
                continue
            out.append(self.ingest(MemoryEvent.from_dict(json.loads(line))))
        return out

    # -- views ------------------------------------------------------------

    def get(self, record_id: str) -> Optional[EpisodicRecord]:
        return self.records.get(record_id)

    def replace(self, record: EpisodicRecord) -> None:
        self.records[record.id] = record

    def active_records(self) -> list[EpisodicRecord]:
        return [r for r in self.records.values() if r.state != STATE_TOMBSTONE]

    def pending_records(self) -> list[EpisodicRecord]:
        pending = [r for r in self.records.values() if r.state == STATE_PENDING]
        pending.sort(key=lambda r: (r.event.timestamp, r.id))
        return pending

    def active_count(self) -> int:
        return sum(1 for r in self.records.values() if r.state != STATE_TOMBSTONE)

    def active_tokens(self) -> int:
        return sum(estimate_tokens(r.content) for r in self.records.values()
                   if r.state != STATE_TOMBSTONE)

    def centroid(self) -> Optional[np.ndarray]:
        if self.centroid_count == 0:
            return None
        return normalize(self.centroid_sum)

    def add_to_centroid(self, embedding: np.ndarray) -> None:
        if self.centroid_sum is None:
            self.centroid_sum = np.zeros_like(embedding)
        self.centroid_sum = self.centroid_sum + embedding
        self.centroid_count += 1

    def is_labile(self, record_id: str, now: datetime) -> bool:
        until = self.labile_until.get(record_id)
        return until is not None and now < until

    def logical_now(self) -> Optional[datetime]:
        """Latest timestamp the store has observed: the ingest watermark or
        any later encoding/promotion time set by lifecycle jobs."""
        candidates = [self.watermark] if self.watermark is not None else []
        candidates.extend(r.encoded_at for r in self.records.values())
        candidates.extend(m.created_at for m in self.graph.memories.values())
        return max(candidates) if candidates else None

    def next_batch_id(self) -> str:
        self.batch_seq += 1
        return f"batch-{self.batch_seq:05d}"

    # -- quarantine -------------------------------------------------------

    def quarantine_event(self, event: MemoryEvent, reason: str,
                         now: datetime) -> QuarantineEntry:
        self.records.pop(event.id, None)
        entry = QuarantineEntry(
            event=event, reason=reason, quarantined_at=now,
            expires_at=now + timedelta(minutes=self.config.quarantine_ttl_min))
        self.quarantine[event.id] = entry
        return entry

    # -- state fingerprint / snapshot --------------------------------------

    def state_dict(self) -> dict[str, Any]:
        return {
            "version": SNAPSHOT_VERSION,
            "config": self.config.to_dict(),
            "records": [self.records[k].to_dict() for k in sorted(self.records)],
            "graph": self.graph.to_dict(),
            "quarantine": [self.quarantine[k].to_dict() for k in sorted(self.quarantine)],
            "admitted_ids": sorted(self.admitted_ids),
            "watermark": rfc3339(self.watermark) if self.watermark else None,
            "centroid_sum": ([float(x) for x in self.centroid_sum]
                             if self.centroid_sum is not None else None),
            "centroid_count": self.centroid_count,
            "labile_until": {k: rfc3339(v) for k, v in sorted(self.labile_until.items())},
            "total_ingested": self.total_ingested,
            "batch_seq": self.batch_seq,
            "calibration_profile": self.calibration_profile,
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.state_dict(), sort_keys=True, separators=(",", ":"))

    def save_snapshot(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.snapshot_json())

    @classmethod
    def from_state_dict(cls, d: dict[str, Any], embedder=None) -> "MemoryStore":
        if d.get("version") != SNAPSHOT_VERSION:
            raise SnapshotFormatError(f"unsupported snapshot version {d.get('version')}")
        store = cls(StoreConfig.from_dict(d["config"]), embedder=embedder)
        for rd in d["records"]:
            rec = EpisodicRecord.from_dict(rd)
            store.records[rec.id] = rec
        store.graph = KnowledgeGraph.from_dict(d["graph"])
        for qd in d["quarantine"]:
            entry = QuarantineEntry.from_dict(qd)
            store.quarantine[entry.event.id] = entry
        store.admitted_ids = set(d["admitted_ids"])
        store.watermark = utc(d["watermark"]) if d["watermark"] else None
        if d["centroid_sum"] is not None:
            store.centroid_sum = np.array(d["centroid_sum"], dtype=np.float64)
        store.centroid_count = d["centroid_count"]
        store.labile_until = {k: utc(v) for k, v in d["labile_until"].items()}
        store.total_ingested = d["total_ingested"]
        store.batch_seq = d["batch_seq"]
        store.calibration_profile = d.get("calibration_profile")
        return store

    @classmethod
    def load_snapshot(cls, path: str, embedder=None) -> "MemoryStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_state_dict(json.load(fh), embedder=embedder)

    # -- transactional support ---------------------------------------------

    def _checkpoint(self) -> dict[str, Any]:
        return {
            "records": copy.deepcopy(self.records),
            "graph": copy.deepcopy(self.graph),
            "quarantine": copy.deepcopy(self.quarantine),
            "admitted_ids": set(self.admitted_ids),
            "watermark": self.watermark,
            "centroid_sum": None if self.centroid_sum is None else self.centroid_sum.copy(),
            "centroid_count": self.centroid_count,
            "labile_until": dict(self.labile_until),
            "total_ingested": self.total_ingested,
            "batch_seq": self.batch_seq,
            "calibration_profile": copy.deepcopy(self.calibration_profile),
        }

    def _restore(self, chk: dict[str, Any]) -> None:
        self.records = chk["records"]
        self.graph = chk["graph"]
        self.quarantine = chk["quarantine"]
        self.admitted_ids = chk["admitted_ids"]
        self.watermark = chk["watermark"]
        self.centroid_sum = chk["centroid_sum"]
        self.centroid_count = chk["centroid_count"]
        self.labile_until = chk["labile_until"]
        self.total_ingested = chk["total_ingested"]
        self.batch_seq = chk["batch_seq"]
        self.calibration_profile = chk["calibration_profile"]
