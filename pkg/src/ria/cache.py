"""In-process representation cache with the contract of an external key-value store."""

from __future__ import annotations

import hashlib
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Hashable, Protocol

import numpy as np

from .errors import CacheMissError, ConfigError

ITEM = "item"
PAGE = "page"


def item_key(request_id: str, item_id: int) -> tuple[str, str, int]:
    return (ITEM, request_id, int(item_id))


def page_key(request_id: str, k: int) -> tuple[str, str, int]:
    return (PAGE, request_id, int(k))


def format_key(key: tuple) -> str:
    return "/".join(str(part) for part in key)


class ReprStore(Protocol):
    """What the rerank stage needs from a cache; a networked store would implement the same calls."""

    def put(self, key: tuple, value: np.ndarray) -> None: ...

    def get_many(self, keys: list[tuple]) -> list[np.ndarray]: ...

    def invalidate(self, request_id: str) -> int: ...


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    stores: int = 0
    overwrites: int = 0
    evictions: int = 0
    expirations: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def as_dict(self) -> dict[str, float]:
        return {"hits": self.hits, "misses": self.misses, "stores": self.stores, "overwrites": self.overwrites,
                "evictions": self.evictions, "expirations": self.expirations, "hit_rate": self.hit_rate}


@dataclass
class _Entry:
    value: np.ndarray
    written: float


class ReprCache:
    """Keyed store of x'' rows and history page encodings, grouped by request.

    Lookups are all-or-nothing per call: if any requested key is absent or
    stale the whole call is one miss and raises :class:`CacheMissError`
    naming the first offending key. Hits return copies of the stored bytes.
    When ``capacity`` (entries) would be exceeded, whole request groups are
    evicted in order of their most recent write.
    """

    def __init__(self, ttl: float = 60.0, capacity: int | None = None,
                 clock: Callable[[], float] = time.monotonic):
        if ttl <= 0:
            raise ConfigError(f"cache ttl must be positive, got {ttl}")
        if capacity is not None and capacity < 1:
            raise ConfigError(f"cache capacity must be >= 1, got {capacity}")
        self.ttl = ttl
        self.capacity = capacity
        self.clock = clock
        self.stats = CacheStats()
        self._entries: dict[tuple, _Entry] = {}
        self._groups: OrderedDict[Hashable, set[tuple]] = OrderedDict()  # oldest write first
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple) -> bool:
        with self._lock:
            entry = self._entries.get(key)
            return entry is not None and not self._stale(entry)

    def _stale(self, entry: _Entry) -> bool:
        return self.clock() - entry.written > self.ttl

    def put(self, key: tuple, value: np.ndarray) -> None:
        stored = np.array(value, copy=True)
        stored.flags.writeable = False
        group = key[1]
        with self._lock:
            if key in self._entries:
                self.stats.overwrites += 1
            self._entries[key] = _Entry(stored, self.clock())
            self._groups.setdefault(group, set()).add(key)
            self._groups.move_to_end(group)
            self.stats.stores += 1
            self._enforce_capacity(group)

    def _enforce_capacity(self, protected: Hashable) -> None:
        if self.capacity is None:
            return
        while len(self._entries) > self.capacity:
            victim = next((g for g in self._groups if g != protected), None)
            if victim is None:
                break  # a single request larger than the cache stays whole
            self.stats.evictions += self._drop_group(victim)

    def _drop_group(self, group: Hashable) -> int:
        keys = self._groups.pop(group, set())
        for key in keys:
            del self._entries[key]
        return len(keys)

    def get_many(self, keys: list[tuple]) -> list[np.ndarray]:
        with self._lock:
            out = []
            for key in keys:
                entry = self._entries.get(key)
                if entry is None:
                    self.stats.misses += 1
                    raise CacheMissError(format_key(key))
                if self._stale(entry):
                    self.stats.misses += 1
                    self.stats.expirations += 1
                    raise CacheMissError(format_key(key) + " (expired)")
                out.append(entry.value.copy())
            self.stats.hits += 1
            return out

    def invalidate(self, request_id: str) -> int:
        with self._lock:
            return self._drop_group(request_id)

    def purge_expired(self) -> int:
        with self._lock:
            stale = [k for k, e in self._entries.items() if self._stale(e)]
            for key in stale:
                del self._entries[key]
                keys = self._groups[key[1]]
                keys.discard(key)
                if not keys:
                    del self._groups[key[1]]
            self.stats.expirations += len(stale)
            return len(stale)

    def dump(self) -> str:
        """One line per entry: key, shape, sha256 prefix of the stored bytes."""
        with self._lock:
            lines = []
            for key in sorted(self._entries, key=lambda k: (k[0], k[1], k[2])):
                value = self._entries[key].value
                shape = "x".join(str(s) for s in value.shape)
                digest = hashlib.sha256(value.tobytes()).hexdigest()[:16]
                lines.append(f"{format_key(key)}\t{shape}\t{value.dtype.name}\t{digest}")
            return "\n".join(lines) + ("\n" if lines else "")
