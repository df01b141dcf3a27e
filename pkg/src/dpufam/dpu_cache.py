"""Proxy-side caching: static pinned regions, a prefetching dynamic cache,
the bandwidth model that decides whether caching can pay off, and the
hit-rate monitor that switches prefetching off when it does not.
"""
from __future__ import annotations

import logging
import random
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import AllocationError, ConfigError

log = logging.getLogger(__name__)

MiB = 1 << 20
RECENT_CAPACITY = 128


# -- analytical model -------------------------------------------------------------


def required_hit_rate(b_net: float, b_intra: float) -> float:
    """Hit rate above which dynamic caching beats fetching from the memory node."""
    if b_net <= 0 or b_intra <= 0:
        raise ValueError("bandwidths must be positive")
    return min(1.0, max(0.0, b_net / b_intra))


@dataclass(frozen=True)
class CacheModel:
    s: float
    b_net: float
    b_intra: float
    h: float

    def __post_init__(self):
        if self.s < 0 or self.b_net <= 0 or self.b_intra <= 0:
            raise ValueError("invalid model parameters")
        if not 0.0 <= self.h <= 1.0:
            raise ValueError(f"hit rate {self.h} outside [0, 1]")

    @property
    def ratio(self) -> float:
        return self.b_net / self.b_intra

    def baseline_time(self) -> float:
        return self.s / self.b_net

    def expected_fetch_time(self) -> float:
        # Every request pays the intra-node hop; misses also pay the network.
        return self.s / self.b_intra + (1.0 - self.h) * self.s / self.b_net

    def beneficial(self) -> bool:
        return self.h > self.ratio


def baseline_fetch_time(s: float, b_net: float) -> float:
    return CacheModel(s, b_net, b_net, 0.0).baseline_time()


def expected_fetch_time(model: CacheModel) -> float:
    return model.expected_fetch_time()


# -- monitoring -----------------------------------------------------------------------


class HitRateMonitor:
    """Hit rate over the last ``window`` lookups."""

    def __init__(self, window: int = 1024):
        if window < 1:
            raise ConfigError("window must be positive")
        self.window = window
        self._events: deque = deque(maxlen=window)
        self._hits = 0
        self._lock = threading.Lock()

    def record(self, hit: bool) -> None:
        with self._lock:
            if len(self._events) == self.window:
                self._hits -= self._events[0]
            self._events.append(1 if hit else 0)
            self._hits += 1 if hit else 0

    @property
    def full(self) -> bool:
        return len(self._events) == self.window

    @property
    def count(self) -> int:
        return len(self._events)

    @property
    def hit_rate(self) -> float:
        with self._lock:
            n = len(self._events)
            return self._hits / n if n else 0.0


def adaptive_decision(h: float, required: float, hysteresis: float, enabled: bool) -> bool:
    """Next enabled state given windowed hit rate ``h``."""
    if enabled and h < required - hysteresis:
        return False
    if not enabled and h > required + hysteresis:
        return True
    return enabled


class AdaptiveController:
    def __init__(self, required: float, hysteresis: float = 0.05):
        self.required = required
        self.hysteresis = hysteresis
        self.enabled = True
        self.transitions: list[tuple[int, bool]] = []

    def update(self, monitor: HitRateMonitor, at: int = 0) -> bool:
        if not monitor.full:
            return self.enabled
        nxt = adaptive_decision(monitor.hit_rate, self.required, self.hysteresis, self.enabled)
        if nxt != self.enabled:
            log.info("dynamic caching %s at lookup %d (h=%.3f, need %.3f)",
                     "enabled" if nxt else "disabled", at, monitor.hit_rate, self.required)
            self.transitions.append((at, nxt))
            self.enabled = nxt
        return self.enabled


# -- recent list ---------------------------------------------------------------------------


class RecentList:
    """Ring of the most recently requested chunk ids; wakes waiters on push."""

    def __init__(self, capacity: int = RECENT_CAPACITY):
        self.capacity = capacity
        self._ring: list = [None] * capacity
        self.head = 0
        self.fill = 0
        self.pushes = 0
        self._cond = threading.Condition()

    def push(self, item) -> None:
        with self._cond:
            self._ring[self.head] = item
            self.head = (self.head + 1) % self.capacity
            self.fill = min(self.capacity, self.fill + 1)
            self.pushes += 1
            self._cond.notify_all()

    def items(self) -> list:
        """Oldest first."""
        with self._cond:
            return self._tail(self.fill)

    def _tail(self, n: int) -> list:
        start = (self.head - n) % self.capacity
        return [self._ring[(start + i) % self.capacity] for i in range(n)]

    def since(self, seen: int, timeout: Optional[float] = None) -> tuple[list, int]:
        """Items pushed after push number ``seen``; waits up to ``timeout`` for one.

        Items already overwritten are lost, as with any bounded history.
        """
        with self._cond:
            if self.pushes == seen and timeout:
                self._cond.wait(timeout)
            n = min(self.pushes - seen, self.fill)
            return self._tail(n), self.pushes

    def wake(self) -> None:
        with self._cond:
            self._cond.notify_all()


# -- cache table -------------------------------------------------------------------------


class _Slot:
    __slots__ = ("key", "data", "length", "refcount", "valid")

    def __init__(self):
        self.key = None
        self.data: Optional[bytearray] = None
        self.length = 0
        self.refcount = 0
        self.valid = False


class CacheTable:
    """Fixed number of equal slots, a hash index, refcount pins, random eviction.

    The mutex guards index metadata only; pinned slot data is read without it.
    """

    def __init__(self, cache_bytes: int, entry_bytes: int = MiB, seed: int = 0):
        if entry_bytes <= 0 or cache_bytes < entry_bytes:
            raise ConfigError("cache must hold at least one entry")
        self.entry_bytes = entry_bytes
        self.n_slots = cache_bytes // entry_bytes
        self.slots = [_Slot() for _ in range(self.n_slots)]
        self.index: dict = {}
        self.generation: dict = {}
        self.filling: dict = {}
        self._free = list(range(self.n_slots - 1, -1, -1))
        self._lock = threading.Lock()
        self._rng = random.Random(seed)
        self.evictions = 0

    @property
    def cache_bytes(self) -> int:
        return self.n_slots * self.entry_bytes

    def lookup(self, key) -> Optional[int]:
        """Pin and return the slot holding ``key``, or None."""
        with self._lock:
            idx = self.index.get(key)
            if idx is None:
                return None
            self.slots[idx].refcount += 1
            return idx

    def fill_event(self, key) -> Optional[threading.Event]:
        with self._lock:
            return self.filling.get(key)

    def release(self, idx: int) -> None:
        with self._lock:
            slot = self.slots[idx]
            if slot.refcount <= 0:
                raise RuntimeError(f"release of unpinned slot {idx}")
            slot.refcount -= 1
            if slot.refcount == 0 and not slot.valid:
                self._free.append(idx)

    def view(self, idx: int, offset: int = 0, n: Optional[int] = None) -> memoryview:
        slot = self.slots[idx]
        end = slot.length if n is None else offset + n
        return memoryview(slot.data)[offset:end]

    def contains(self, key) -> bool:
        with self._lock:
            return key in self.index

    def _evict_one(self) -> Optional[int]:
        candidates = [i for i in self.index.values() if self.slots[i].refcount == 0]
        if not candidates:
            return None
        idx = self._rng.choice(sorted(candidates))
        slot = self.slots[idx]
        del self.index[slot.key]
        slot.valid = False
        slot.key = None
        self.evictions += 1
        return idx

    def reserve(self, key) -> Optional[tuple[int, int, memoryview]]:
        """Claim a slot to fill with ``key``.

        Returns ``(slot, generation, writable view)`` or None when the key is
        present, already being filled, or every slot is pinned.
        """
        with self._lock:
            if key in self.index or key in self.filling:
                return None
            idx = self._free.pop() if self._free else self._evict_one()
            if idx is None:
                return None
            slot = self.slots[idx]
            slot.refcount = 1
            slot.valid = False
            slot.key = key
            if slot.data is None:
                slot.data = bytearray(self.entry_bytes)
            self.filling[key] = threading.Event()
            return idx, self.generation.get(key, 0), memoryview(slot.data)

    def install(self, idx: int, key, gen: int, length: int) -> bool:
        with self._lock:
            ev = self.filling.pop(key, None)
            slot = self.slots[idx]
            slot.refcount -= 1
            ok = self.generation.get(key, 0) == gen and length > 0
            if ok:
                slot.valid = True
                slot.length = length
                self.index[key] = idx
            else:
                slot.key = None
                if slot.refcount == 0:
                    self._free.append(idx)
        if ev is not None:
            ev.set()
        return ok

    def abort(self, idx: int, key) -> None:
        self.install(idx, key, -1, 0)

    def invalidate(self, key) -> None:
        with self._lock:
            self.generation[key] = self.generation.get(key, 0) + 1
            idx = self.index.pop(key, None)
            if idx is None:
                return
            slot = self.slots[idx]
            slot.valid = False
            slot.key = None
            if slot.refcount == 0:
                self._free.append(idx)

    def evict_random(self) -> bool:
        """Force one eviction (test and pressure hook)."""
        with self._lock:
            idx = self._evict_one()
            if idx is None:
                return False
            self._free.append(idx)
            return True

    def pinned(self) -> int:
        with self._lock:
            return sum(1 for s in self.slots if s.refcount > 0)


# -- static cache ----------------------------------------------------------------------------


class StaticCache:
    """Pinned copies of whole chunk ranges; never evicted, never refreshed."""

    def __init__(self, budget_bytes: int):
        self.budget_bytes = budget_bytes
        self.used = 0
        self.regions: dict[int, tuple[int, int, int, bytearray]] = {}
        self._lock = threading.Lock()

    def reserve(self, nbytes: int) -> None:
        with self._lock:
            if self.used + nbytes > self.budget_bytes:
                raise AllocationError(
                    f"static load of {nbytes} bytes exceeds DPU budget "
                    f"({self.budget_bytes - self.used} left)")
            self.used += nbytes

    def unreserve(self, nbytes: int) -> None:
        with self._lock:
            self.used -= nbytes

    def add(self, region_id: int, first_chunk: int, n_chunks: int, chunk_size: int,
            data: bytearray) -> None:
        with self._lock:
            self.regions[region_id] = (first_chunk, n_chunks, chunk_size, data)

    def lookup(self, region_id: int, chunk: int, size: int) -> Optional[memoryview]:
        entry = self.regions.get(region_id)
        if entry is None:
            return None
        first, n, cs, data = entry
        if not first <= chunk < first + n:
            return None
        off = (chunk - first) * cs
        if off + size > len(data):
            return None
        return memoryview(data)[off:off + size]

    def update(self, region_id: int, chunk: int, data) -> None:
        entry = self.regions.get(region_id)
        if entry is None:
            return
        first, n, cs, buf = entry
        off = (chunk - first) * cs
        lo = max(0, -off)
        hi = min(len(data), len(buf) - off)
        if hi > lo:
            buf[off + lo:off + hi] = data[lo:hi]

    def covers(self, region_id: int, chunk: int) -> bool:
        entry = self.regions.get(region_id)
        return entry is not None and entry[0] <= chunk < entry[0] + entry[1]

    def drop(self, region_id: int) -> None:
        with self._lock:
            entry = self.regions.pop(region_id, None)
            if entry is not None:
                self.used -= len(entry[3])


# -- dynamic cache ---------------------------------------------------------------------------


@dataclass
class CacheStats:
    hits: int = 0
    late_hits: int = 0
    misses: int = 0
    prefetch_fills: int = 0
    prefetch_bytes: int = 0
    dropped_fills: int = 0


# fetch(region_id, byte_offset, into) -> number of bytes stored in ``into``
# (0 when the range starts past the region end).
FetchFn = Callable[[int, int, memoryview], int]


class DynamicCache:
    """Recent-list-driven prefetching into a :class:`CacheTable`.

    Keys are ``(region_id, group)`` where a group spans ``entry_bytes`` of
    the region. Every lookup records the requested chunk; a worker thread
    fetches the enclosing group and ``prefetch_degree`` following groups.
    When the windowed hit rate falls below what the link ratio requires,
    the worker stops prefetching; lookups keep being served and monitored.
    """

    def __init__(self, fetch: FetchFn, *, cache_bytes: int = 1 << 30, entry_bytes: int = MiB,
                 chunk_size: int = 64 * 1024, prefetch_degree: int = 1,
                 hit_window: int = 1024, hysteresis: float = 0.05,
                 required: float = 0.5, seed: int = 0, adaptive: bool = True,
                 fill_wait: float = 5.0):
        if entry_bytes % chunk_size:
            raise ConfigError("entry_bytes must be a multiple of chunk_size")
        if prefetch_degree < 0:
            raise ConfigError("prefetch_degree must be >= 0")
        self.fetch = fetch
        self.table = CacheTable(cache_bytes, entry_bytes, seed)
        self.chunk_size = chunk_size
        self.entry_bytes = entry_bytes
        self.prefetch_degree = prefetch_degree
        self.recent = RecentList()
        self.monitor = HitRateMonitor(hit_window)
        self.controller = AdaptiveController(required, hysteresis)
        self.adaptive = adaptive
        self.fill_wait = fill_wait
        self.stats = CacheStats()
        self._stats_lock = threading.Lock()
        self._lookups = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._seen = 0

    @property
    def enabled(self) -> bool:
        return self.controller.enabled

    def group_of(self, chunk: int) -> int:
        return chunk * self.chunk_size // self.entry_bytes

    def lookup(self, region_id: int, chunk: int, size: int):
        """Return ``(slot, view)`` on a hit (slot pinned), None on a miss."""
        self.recent.push((region_id, chunk))
        key = (region_id, self.group_of(chunk))
        idx = self.table.lookup(key)
        late = False
        if idx is None:
            ev = self.table.fill_event(key)
            if ev is not None and ev.wait(self.fill_wait):
                idx = self.table.lookup(key)
                late = idx is not None
        off = chunk * self.chunk_size - key[1] * self.entry_bytes
        if idx is not None and off + size > self.table.slots[idx].length:
            self.table.release(idx)
            idx = None
        with self._stats_lock:
            self._lookups += 1
            if idx is None:
                self.stats.misses += 1
            else:
                self.stats.hits += 1
                self.stats.late_hits += late
            self.monitor.record(idx is not None)
            if self.adaptive:
                self.controller.update(self.monitor, self._lookups)
        if idx is None:
            return None
        return idx, self.table.view(idx, off, size)

    def release(self, idx: int) -> None:
        self.table.release(idx)

    def invalidate(self, region_id: int, first_chunk: int, n_chunks: int = 1) -> None:
        g0 = self.group_of(first_chunk)
        g1 = self.group_of(first_chunk + n_chunks - 1)
        for g in range(g0, g1 + 1):
            self.table.invalidate((region_id, g))

    def drop_region(self, region_id: int) -> None:
        for key in [k for k in list(self.table.index) if k[0] == region_id]:
            self.table.invalidate(key)

    # -- prefetching ----------------------------------------------------------------------

    def fill(self, region_id: int, group: int) -> bool:
        got = self.table.reserve((region_id, group))
        if got is None:
            return False
        idx, gen, view = got
        try:
            n = self.fetch(region_id, group * self.entry_bytes, view)
        except Exception as exc:
            log.warning("prefetch of %s/%d failed: %s", region_id, group, exc)
            self.table.abort(idx, (region_id, group))
            return False
        ok = self.table.install(idx, (region_id, group), gen, n)
        with self._stats_lock:
            if ok:
                self.stats.prefetch_fills += 1
                self.stats.prefetch_bytes += n
            elif n:
                self.stats.dropped_fills += 1
        return ok

    def prefetch_for(self, region_id: int, chunk: int) -> int:
        if not self.enabled:
            return 0
        g = self.group_of(chunk)
        done = 0
        for k in range(self.prefetch_degree + 1):
            done += self.fill(region_id, g + k)
        return done

    def process_pending(self, timeout: Optional[float] = None) -> int:
        items, self._seen = self.recent.since(self._seen, timeout)
        done = 0
        for region_id, chunk in items:
            done += self.prefetch_for(region_id, chunk)
        return done

    def _run(self):
        while not self._stop.is_set():
            try:
                self.process_pending(timeout=0.05)
            except Exception:
                log.exception("prefetch worker")

    def start(self) -> "DynamicCache":
        self._thread = threading.Thread(target=self._run, name="prefetch", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.recent.wake()
        if self._thread is not None:
            self._thread.join(timeout=2)
