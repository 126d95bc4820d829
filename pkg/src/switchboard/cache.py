"""Thread-safe LRU handle-passing cache.

Payloads cross the bus as handles into this cache; get() returns the very
object put() stored (identity, never a copy), which is what removes
serialization from the hot path. Recency is refreshed on both get and put.
"""

import threading
from dataclasses import dataclass

from . import _kernels
from .errors import ZeroCapacity


@dataclass(frozen=True)
class CacheRef:
    """Opaque handle to a cached payload; this is what travels in events."""

    key: str


class LruCache:
    """Bounded LRU map over opaque shared handles."""

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ZeroCapacity(f"capacity must be >= 1, got {capacity}")
        self._core = _kernels.LruCore(capacity)
        self._lock = threading.Lock()
        self.capacity = capacity

    def __len__(self):
        with self._lock:
            return len(self._core)

    def __contains__(self, key):
        with self._lock:
            return key in self._core

    def put(self, key, value):
        """Insert/update; returns the evicted key when capacity was exceeded, else None."""
        with self._lock:
            return self._core.put(key, value)

    def get(self, key, default=None):
        """Hit refreshes recency and returns the stored handle itself; miss returns default."""
        with self._lock:
            value = self._core.get(key)
        return default if value is _kernels.MISS else value

    def store(self, key, value) -> CacheRef:
        """put() plus a CacheRef for shipping the payload over the bus."""
        self.put(key, value)
        return CacheRef(key)

    def resolve(self, ref, default=None):
        """Value behind a CacheRef (or any plain key)."""
        key = ref.key if isinstance(ref, CacheRef) else ref
        return self.get(key, default)
