"""Entity knowledge graph with maturation dynamics.

Semantic memories attach to entities; entities co-occur when they share a
memory. A promoted memory starts "silent" and its retrievability grows along
a sigmoid of its age; below the 0.5 threshold it can only prime episodic
results, never surface directly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Iterable, Optional

import numpy as np

from .errors import NegativeElapsed
from .model import StoreConfig, hours_between, rfc3339, utc

RETRIEVAL_THRESHOLD = 0.5

# Lowercased words that do not count as an entity when they open a sentence.
_SENTENCE_INITIAL_STOPWORDS = {
    "a", "an", "the", "i", "we", "you", "he", "she", "it", "they", "this",
    "that", "these", "those", "my", "our", "your", "his", "her", "its",
    "their", "in", "on", "at", "and", "or", "but", "if", "so", "as", "to",
    "of", "for", "with", "by", "from", "is", "are", "was", "were", "do",
    "does", "did", "not", "no", "yes", "when", "what", "who", "how", "why",
    "where", "there", "here", "then", "now", "please", "thanks", "ok",
    "okay", "also", "after", "before", "while", "since",
}

_WORD_RE = re.compile(r"[@#][\w][\w'-]*|[A-Za-z][\w'-]*")
_SENTENCE_SPLIT_RE = re.compile(r"[.!?\n]+")


def extract_entities(content: str,
                     extractor: Optional[Callable[[str], Iterable[str]]] = None
                     ) -> tuple[str, ...]:
    """Pull entity names out of text.

    Default rule-based pass: maximal runs of capitalized tokens (a
    sentence-initial stopword does not start a run), plus @-mentions and
    #-refs. An external extractor may be plugged in; on failure it falls
    back to the default rule.
    """
    if extractor is not None:
        try:
            return tuple(dict.fromkeys(extractor(content)))
        except Exception:
            pass
    entities: dict[str, None] = {}
    for sentence in _SENTENCE_SPLIT_RE.split(content):
        tokens = _WORD_RE.findall(sentence)
        run: list[str] = []
        for i, tok in enumerate(tokens):
            if tok.startswith("@") or tok.startswith("#"):
                entities.setdefault(tok, None)
                if run:
                    entities.setdefault(" ".join(run), None)
                    run = []
                continue
            capitalized = tok[0].isupper()
            if capitalized and i == 0 and tok.lower() in _SENTENCE_INITIAL_STOPWORDS:
                capitalized = False
            if capitalized:
                run.append(tok)
            elif run:
                entities.setdefault(" ".join(run), None)
                run = []
        if run:
            entities.setdefault(" ".join(run), None)
    return tuple(entities)


def activation(created_at: datetime, now: datetime, t_half: float, k: float) -> float:
    """Sigmoid maturation curve over elapsed hours."""
    t = hours_between(created_at, now)
    if t < 0:
        raise NegativeElapsed(f"now precedes creation by {-t:.3f}h")
    return 1.0 / (1.0 + math.exp(-(t - t_half) / k))


@dataclass
class EntityNode:
    name: str
    importance: float = 0.0
    first_seen: datetime = None  # type: ignore[assignment]
    last_seen: datetime = None  # type: ignore[assignment]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "importance": self.importance,
            "first_seen": rfc3339(self.first_seen),
            "last_seen": rfc3339(self.last_seen),
        }


@dataclass(eq=False)
class SemanticMemory:
    id: str
    gist: str
    embedding: np.ndarray
    source_ids: frozenset[str]
    created_at: datetime
    entities: tuple[str, ...] = ()
    access_count: int = 0

    def activation(self, now: datetime, config: StoreConfig) -> float:
        if not config.maturation_enabled:
            return 1.0
        return activation(self.created_at, now,
                          config.maturation_half_life_h, config.maturation_slope)

    def is_explicitly_retrievable(self, now: datetime, config: StoreConfig) -> bool:
        return self.activation(now, config) >= RETRIEVAL_THRESHOLD

    def priming_weight(self, now: datetime, config: StoreConfig) -> float:
        """Activation value usable as a priming bonus while silent; zero once
        the memory surfaces directly."""
        a = self.activation(now, config)
        return 0.0 if a >= RETRIEVAL_THRESHOLD else a

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "gist": self.gist,
            "embedding": [float(x) for x in self.embedding],
            "source_ids": sorted(self.source_ids),
            "created_at": rfc3339(self.created_at),
            "entities": list(self.entities),
            "access_count": self.access_count,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SemanticMemory":
        return cls(
            id=d["id"],
            gist=d["gist"],
            embedding=np.array(d["embedding"], dtype=np.float64),
            source_ids=frozenset(d["source_ids"]),
            created_at=utc(d["created_at"]),
            entities=tuple(d["entities"]),
            access_count=d["access_count"],
        )


class KnowledgeGraph:
    """Entities, semantic memories, and co-occurrence structure.

    Entity names are case-folded for identity but keep their first-seen
    display form. Entity importance is degree / max degree, recomputed per
    batch; degree counts mention edges plus co-occurrence edges.
    """

    def __init__(self):
        self.entities: dict[str, EntityNode] = {}          # key: casefolded name
        self.memories: dict[str, SemanticMemory] = {}
        self.entity_memories: dict[str, set[str]] = {}     # entity key -> memory ids
        self.co_occurs: dict[tuple[str, str], int] = {}    # sorted key pair -> weight
        self._by_source_set: dict[frozenset[str], str] = {}
        self._next_memory_seq = 0

    # -- entities ---------------------------------------------------------

    def _key(self, name: str) -> str:
        return name.casefold()

    def touch_entity(self, name: str, when: datetime) -> EntityNode:
        key = self._key(name)
        node = self.entities.get(key)
        if node is None:
            node = EntityNode(name=name, first_seen=when, last_seen=when)
            self.entities[key] = node
            self.entity_memories[key] = set()
        else:
            if when > node.last_seen:
                node.last_seen = when
            if when < node.first_seen:
                node.first_seen = when
        return node

    def entity_importance(self, name: str) -> float:
        node = self.entities.get(self._key(name))
        return node.importance if node else 0.0

    def recompute_importance(self) -> None:
        degrees = {key: len(mems) for key, mems in self.entity_memories.items()}
        for (a, b), _w in self.co_occurs.items():
            degrees[a] = degrees.get(a, 0) + 1
            degrees[b] = degrees.get(b, 0) + 1
        max_degree = max(degrees.values(), default=0)
        for key, node in self.entities.items():
            if max_degree == 0:
                node.importance = 1.0 if len(self.entities) == 1 else 0.0
            else:
                node.importance = degrees.get(key, 0) / max_degree

    # -- memories ---------------------------------------------------------

    def find_by_source_set(self, source_ids: frozenset[str]) -> Optional[SemanticMemory]:
        mem_id = self._by_source_set.get(source_ids)
        return self.memories.get(mem_id) if mem_id else None

    def insert_memory(self, gist: str, embedding: np.ndarray,
                      source_ids: frozenset[str], entities: Iterable[str],
                      created_at: datetime) -> SemanticMemory:
        """Insert a semantic memory; idempotent on the source-id set."""
        existing = self.find_by_source_set(source_ids)
        if existing is not None:
            return existing
        mem_id = f"sem-{self._next_memory_seq:06d}"
        self._next_memory_seq += 1
        names = tuple(dict.fromkeys(entities))
        mem = SemanticMemory(id=mem_id, gist=gist, embedding=embedding,
                             source_ids=source_ids, created_at=created_at,
                             entities=names)
        self.memories[mem_id] = mem
        self._by_source_set[source_ids] = mem_id
        keys = []
        for name in names:
            self.touch_entity(name, created_at)
            key = self._key(name)
            self.entity_memories[key].add(mem_id)
            keys.append(key)
        for i in range(len(keys)):
            for j in range(i + 1, len(keys)):
                pair = tuple(sorted((keys[i], keys[j])))
                if pair[0] != pair[1]:
                    self.co_occurs[pair] = self.co_occurs.get(pair, 0) + 1
        self.recompute_importance()
        return mem

    def replace_memory(self, mem: SemanticMemory) -> None:
        self.memories[mem.id] = mem

    # -- traversal --------------------------------------------------------

    def neighbors(self, key: str) -> list[tuple[str, int]]:
        out = []
        for (a, b), w in self.co_occurs.items():
            if a == key:
                out.append((b, w))
            elif b == key:
                out.append((a, w))
        # deterministic visit order: heavier edges first, then name
        out.sort(key=lambda kw: (-kw[1], kw[0]))
        return out

    def traverse(self, seed_entities: Iterable[str], max_hops: int = 2
                 ) -> list[tuple[SemanticMemory, int]]:
        """Breadth-first walk over the entity graph collecting attached
        memories; each memory is returned once at its minimal hop distance.
        Unknown seeds contribute nothing."""
        if max_hops < 1:
            raise ValueError("max_hops must be >= 1")
        visited: dict[str, int] = {}
        frontier: list[str] = []
        for name in seed_entities:
            key = self._key(name)
            if key in self.entities and key not in visited:
                visited[key] = 0
                frontier.append(key)
        results: dict[str, tuple[SemanticMemory, int]] = {}
        depth = 0
        while frontier:
            for key in frontier:
                for mem_id in sorted(self.entity_memories.get(key, ())):
                    if mem_id not in results:
                        results[mem_id] = (self.memories[mem_id], visited[key])
            if depth >= max_hops:
                break
            depth += 1
            nxt: list[str] = []
            for key in frontier:
                for nkey, _w in self.neighbors(key):
                    if nkey not in visited:
                        visited[nkey] = depth
                        nxt.append(nkey)
            frontier = nxt
        return sorted(results.values(), key=lambda mi: (mi[1], mi[0].id))

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "entities": [self.entities[k].to_dict() for k in sorted(self.entities)],
            "memories": [self.memories[k].to_dict() for k in sorted(self.memories)],
            "co_occurs": [[a, b, w] for (a, b), w in sorted(self.co_occurs.items())],
            "next_memory_seq": self._next_memory_seq,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KnowledgeGraph":
        g = cls()
        for ed in d["entities"]:
            node = EntityNode(name=ed["name"], importance=ed["importance"],
                              first_seen=utc(ed["first_seen"]),
                              last_seen=utc(ed["last_seen"]))
            g.entities[g._key(node.name)] = node
            g.entity_memories[g._key(node.name)] = set()
        for md in d["memories"]:
            mem = SemanticMemory.from_dict(md)
            g.memories[mem.id] = mem
            g._by_source_set[mem.source_ids] = mem.id
            for name in mem.entities:
                g.entity_memories.setdefault(g._key(name), set()).add(mem.id)
        g.co_occurs = {(a, b): w for a, b, w in d["co_occurs"]}
        g._next_memory_seq = d["next_memory_seq"]
        return g
