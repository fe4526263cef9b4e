"""engram: a tiered memory lifecycle engine for long-running agents.

Raw events land in a hot episodic tier, get scored and consolidated into a
warm tier and a semantic knowledge graph, and are forgotten gracefully down
a fidelity ladder instead of being deleted.
"""

from .errors import EngramError
from .model import (
    EpisodicRecord,
    FidelityLevel,
    MemoryEvent,
    StoreConfig,
    decayed_importance,
)
from .store import MemoryStore

__version__ = "0.1.0"

__all__ = [
    "EngramError",
    "EpisodicRecord",
    "FidelityLevel",
    "MemoryEvent",
    "MemoryStore",
    "StoreConfig",
    "decayed_importance",
    "__version__",
]
