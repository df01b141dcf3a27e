"""Host-side runtime: FAM allocation, interposed access and the chunk buffer.

Applications call :meth:`HostAgent.fam_read` / :meth:`HostAgent.fam_write`
instead of touching fault-backed pointers. All handles share one
:class:`PageBuffer` of equal-sized chunks managed with exact LRU.
"""
from __future__ import annotations

import itertools
import logging
import math
import queue
import threading
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from . import protocol as P
from .counters import BACKGROUND, ON_DEMAND
from .errors import CoherenceError, ConfigError, FamError, ProtectionFault

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 64 * 1024
MODES = ("direct", "offload")


@dataclass(frozen=True)
class FamHandle:
    region_id: int
    length: int
    writable: bool
    chunk_size: int
    rkey: int
    memory: str

    @property
    def n_chunks(self) -> int:
        return -(-self.length // self.chunk_size)

    def chunk_bytes(self, chunk: int) -> int:
        return min(self.chunk_size, self.length - chunk * self.chunk_size)


class BufferEntry:
    __slots__ = ("data", "dirty", "pins", "ready", "error")

    def __init__(self, data: Optional[bytearray] = None, *, pins: int = 0):
        self.data = data
        self.dirty = False
        self.pins = pins
        self.ready = threading.Event()
        self.error: Optional[BaseException] = None
        if data is not None:
            self.ready.set()


class PageBuffer:
    """Fixed-capacity chunk buffer with exact LRU order and dirty bits.

    Keys are ``(region_id, chunk_index)``. Iteration order of ``entries`` is
    recency order, least recent first. Pinned entries are never chosen as
    victims.
    """

    def __init__(self, capacity_chunks: int, load_threshold: float = 0.9,
                 low_water: float = 0.8):
        if capacity_chunks < 1:
            raise ConfigError("buffer needs at least one chunk")
        if not 0 < load_threshold <= 1:
            raise ConfigError("load_threshold must be in (0, 1]")
        if load_threshold < 1 and not 0 <= low_water < load_threshold:
            raise ConfigError("low_water must be below load_threshold")
        self.capacity_chunks = capacity_chunks
        self.load_threshold = load_threshold
        self.low_water = low_water
        self.entries: "OrderedDict[tuple[int, int], BufferEntry]" = OrderedDict()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def get(self, key) -> Optional[BufferEntry]:
        e = self.entries.get(key)
        if e is not None:
            self.entries.move_to_end(key)
        return e

    def peek(self, key) -> Optional[BufferEntry]:
        return self.entries.get(key)

    def insert(self, key, entry: BufferEntry) -> None:
        if key in self.entries:
            raise KeyError(f"{key} already resident")
        if len(self.entries) >= self.capacity_chunks:
            raise OverflowError("buffer full")
        self.entries[key] = entry

    def full(self) -> bool:
        return len(self.entries) >= self.capacity_chunks

    def pop_lru(self, n: int) -> list[tuple[tuple[int, int], BufferEntry]]:
        """Remove up to ``n`` least recently used unpinned entries."""
        out = []
        for key, e in self.entries.items():
            if len(out) >= n:
                break
            if e.pins == 0 and e.ready.is_set():
                out.append((key, e))
        for key, _ in out:
            del self.entries[key]
        return out

    def over_threshold(self) -> bool:
        if self.load_threshold >= 1.0:
            return False
        return len(self.entries) >= self.load_threshold * self.capacity_chunks - 1e-9

    def low_water_count(self) -> int:
        return int(math.floor(self.low_water * self.capacity_chunks + 1e-9))

    def drop_region(self, region_id: int) -> None:
        for key in [k for k in self.entries if k[0] == region_id]:
            del self.entries[key]


@dataclass
class HostStats:
    # read_requests counts chunk fetches; bypass_reads is the subset done with
    # one-sided reads straight from the memory node.
    hits: int = 0
    misses: int = 0
    read_requests: int = 0
    bypass_reads: int = 0
    write_requests: int = 0
    evictions: int = 0
    proactive_evictions: int = 0
    proactive_triggers: int = 0


@dataclass
class _PendingWrite:
    data: bytes
    done: threading.Event = field(default_factory=threading.Event)
    error: Optional[BaseException] = None


class HostAgent:
    """One client session (one application process) of the runtime.

    In ``offload`` mode requests go to the proxy agent ``proxy``; in
    ``direct`` mode the host reads and writes the memory node itself with
    one-sided operations and evictions are synchronous.
    """

    def __init__(self, fabric, endpoint_id: str = "host0", *, mode: str = "offload",
                 proxy: str = "dpu0", memory: str = "mem0",
                 chunk_size: int = DEFAULT_CHUNK, buffer_chunks: int = 1024,
                 load_threshold: float = 0.9, low_water: float = 0.8,
                 qp_count: int = 4, window_chunks: Optional[int] = None,
                 static_bypass: bool = True, rpc_timeout: float = 60.0):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if chunk_size <= 0:
            raise ConfigError("chunk_size must be positive")
        if mode == "offload" and chunk_size + P.WRITE_HEADER_BYTES > fabric.max_message:
            raise ConfigError("chunk does not fit in one message")
        self.fabric = fabric
        self.id = endpoint_id
        self.mode = mode
        self.proxy = proxy
        self.memory = memory
        self.chunk_size = chunk_size
        self.qp_count = qp_count
        self.static_bypass = static_bypass
        self.rpc_timeout = rpc_timeout
        self.buffer = PageBuffer(buffer_chunks, load_threshold, low_water)
        self.window_chunks = window_chunks or max(1, min(32, buffer_chunks // 8))
        self.stats = HostStats()
        self.handles: dict[int, FamHandle] = {}
        self.static: dict[int, set[int]] = {}

        self.endpoint = fabric.create_endpoint(endpoint_id, "host")
        # Communication buffer the response path could target with one-sided
        # writes; its rkey travels in every ReadRequest.
        self.staging = fabric.register_region(endpoint_id, chunk_size)
        self._lock = threading.Lock()
        self._room = threading.Condition(self._lock)
        self._tokens = itertools.count(1)
        self._inflight: dict[int, Future] = {}
        self._pending_wb: dict[tuple[int, int], _PendingWrite] = {}
        self._wb_errors: list[BaseException] = []
        self._rpc_lock = threading.Lock()
        self._rpc_future: Optional[Future] = None
        self._writer = ThreadPoolExecutor(1, thread_name_prefix=f"{endpoint_id}-wb")
        self._stop = threading.Event()
        self._dispatcher = threading.Thread(target=self._dispatch, name=f"{endpoint_id}-rx",
                                            daemon=True)
        self._dispatcher.start()
        self._closed = False
        if mode == "offload":
            self._rpc(P.Setup(self.id))

    # -- control plane ---------------------------------------------------------------

    @property
    def _control_peer(self) -> str:
        return self.proxy if self.mode == "offload" else self.memory

    def _rpc(self, msg: P.ControlMessage) -> P.ControlMessage:
        with self._rpc_lock:
            fut: Future = Future()
            self._rpc_future = fut
            self.fabric.send(self.id, self._control_peer, P.encode_control(msg), P.Imm.CONTROL,
                             tclass=BACKGROUND, client=self.id)
            reply = fut.result(timeout=self.rpc_timeout)
            self._rpc_future = None
        if isinstance(reply, P.ErrorReply):
            raise reply.exception()
        return reply

    def fam_alloc(self, length: int, file: Optional[str] = None,
                  writable: bool = True) -> FamHandle:
        if length <= 0:
            raise FamError("length must be positive")
        ack = self._rpc(P.AllocRegion(length, self.id, writable, file))
        return self._register(ack, writable)

    def fam_map(self, region_id: int, writable: bool = False) -> FamHandle:
        ack = self._rpc(P.MapRegion(region_id, self.id, writable))
        return self._register(ack, writable)

    def _register(self, ack: P.AllocAck, writable: bool) -> FamHandle:
        h = FamHandle(ack.region_id, ack.length, writable, self.chunk_size, ack.rkey, ack.memory)
        self.handles[h.region_id] = h
        return h

    def fam_free(self, h: FamHandle) -> None:
        with self._lock:
            self.buffer.drop_region(h.region_id)
        self._rpc(P.FreeRegion(h.region_id, self.id))
        self.handles.pop(h.region_id, None)
        self.static.pop(h.region_id, None)

    def static_load(self, h: FamHandle, first_chunk: int = 0,
                    n_chunks: Optional[int] = None) -> None:
        """Ask the proxy to pin a chunk range and remember it as a known hit."""
        if self.mode != "offload":
            raise ConfigError("static caching needs offload mode")
        n = h.n_chunks - first_chunk if n_chunks is None else n_chunks
        ack = self._rpc(P.StaticLoad(h.region_id, first_chunk, n, self.chunk_size))
        self.static.setdefault(h.region_id, set()).update(
            range(ack.first_chunk, ack.first_chunk + ack.n_chunks))

    # -- receive path --------------------------------------------------------------------

    def _dispatch(self):
        while not self._stop.is_set():
            try:
                m = self.endpoint.recv(timeout=0.05)
            except queue.Empty:
                continue
            try:
                self._on_message(m)
            except Exception:
                log.exception("%s: bad message from %s", self.id, m.sender)

    def _on_message(self, m):
        if m.imm == P.Imm.READ:
            token, data = P.decode_read_response(m.payload)
            fut = self._inflight.pop(token, None)
            if fut is not None:
                fut.set_result(data)
        elif m.imm == P.Imm.WRITE:
            rid, chunk, _ = P.decode_write_ack(m.payload)
            self._complete_writeback((rid, chunk), None)
        elif m.imm == P.Imm.ERROR:
            kind, key, exc = P.decode_error(m.payload)
            if kind == P.Imm.READ:
                fut = self._inflight.pop(key, None)
                if fut is not None:
                    fut.set_exception(exc)
            else:
                self._complete_writeback(P.unpack_word0(key), exc)
        elif m.imm == P.Imm.CONTROL:
            fut = self._rpc_future
            if fut is not None and not fut.done():
                fut.set_result(P.decode_control(m.payload))
        else:
            log.warning("%s: unexpected immediate %d", self.id, m.imm)

    def _bump(self, name: str, k: int = 1) -> None:
        with self._lock:
            setattr(self.stats, name, getattr(self.stats, name) + k)

    def _complete_writeback(self, key, exc):
        with self._lock:
            pending = self._pending_wb.pop(key, None)
            if exc is not None:
                self._wb_errors.append(exc)
        if pending is not None:
            pending.error = exc
            pending.done.set()

    # -- fetch / write-back I/O --------------------------------------------------------------

    def _bypasses(self, rid: int, chunk: int) -> bool:
        return (self.mode == "offload" and self.static_bypass and bool(self.static)
                and chunk not in self.static.get(rid, ()))

    def _fetch_many(self, items) -> None:
        """Fill ``(handle, chunk, entry)`` items; sends all requests before waiting."""
        waits = []
        for h, chunk, e in items:
            key = (h.region_id, chunk)
            pending = self._pending_wb.get(key)
            if pending is not None:
                pending.done.wait()
            size = h.chunk_bytes(chunk)
            try:
                if self.mode == "direct" or self._bypasses(h.region_id, chunk):
                    if self.mode == "offload":
                        self._bump("bypass_reads")
                    e.data = bytearray(self.fabric.one_sided_read(
                        self.id, h.memory, h.rkey, chunk * self.chunk_size, size,
                        client=self.id, region=h.region_id))
                    e.ready.set()
                    continue
                token = next(self._tokens)
                fut: Future = Future()
                self._inflight[token] = fut
                req = P.ReadRequest(h.region_id, chunk, token, size, self.staging.rkey)
                self.fabric.send(self.id, self.proxy, P.encode_read(req), P.Imm.READ,
                                 client=self.id, region=h.region_id)
                waits.append((e, fut))
            except BaseException as exc:
                e.error = exc
                e.ready.set()
        for e, fut in waits:
            try:
                e.data = bytearray(fut.result(timeout=self.rpc_timeout))
            except BaseException as exc:
                e.error = exc
            e.ready.set()

    def _retire(self, victims, proactive: bool = False) -> list:
        """Account evicted entries; dirty ones become pending write-backs. Lock held."""
        out = []
        for key, e in victims:
            if proactive:
                self.stats.proactive_evictions += 1
            else:
                self.stats.evictions += 1
            if not e.dirty:
                continue
            h = self.handles.get(key[0])
            if h is None:
                continue
            data = bytes(e.data)
            pending = _PendingWrite(data)
            self._pending_wb[key] = pending
            out.append((h, key[1], pending))
        return out

    def _write_back(self, items, *, background: bool) -> list[P.WriteRequest]:
        reqs = []
        for h, chunk, pending in items:
            req = P.WriteRequest(h.region_id, chunk, len(pending.data), pending.data)
            reqs.append(req)
            self._bump("write_requests")
            if self.mode == "offload":
                # Fire and forget: the ack from the proxy completes ``pending``.
                self.fabric.send(self.id, self.proxy, P.encode_write(req), P.Imm.WRITE,
                                 client=self.id, region=h.region_id)
            elif background:
                self._writer.submit(self._direct_write, h, chunk, pending)
            else:
                self._direct_write(h, chunk, pending)
        return reqs

    def _direct_write(self, h: FamHandle, chunk: int, pending: _PendingWrite):
        exc = None
        try:
            self.fabric.one_sided_write(self.id, h.memory, h.rkey, chunk * self.chunk_size,
                                        pending.data, client=self.id, region=h.region_id)
        except BaseException as e:
            exc = e
            log.error("%s: write-back of %s/%d failed: %s", self.id, h.region_id, chunk, e)
        self._complete_writeback((h.region_id, chunk), exc)

    # -- buffer management ------------------------------------------------------------------------

    def _acquire(self, h: FamHandle, chunks: range, cover=None):
        """Pin ``chunks`` of ``h`` into the buffer, fetching misses.

        ``cover(chunk)`` returns True when the caller will overwrite the whole
        chunk, which skips the fetch. May stop early rather than wait for room
        while holding pins; returns the pinned ``(chunk, entry)`` prefix.
        """
        got, fetch, fresh = [], [], []
        demand, proactive = [], []
        with self._lock:
            for chunk in chunks:
                key = (h.region_id, chunk)
                e = self.buffer.get(key)
                stop = False
                while e is None and self.buffer.full():
                    victims = self.buffer.pop_lru(1)
                    if victims:
                        demand += self._retire(victims)
                    elif got:
                        # never wait for room while holding pins
                        stop = True
                        break
                    else:
                        self._room.wait()
                        e = self.buffer.get(key)
                if stop:
                    break
                if e is not None:
                    self.stats.hits += 1
                    e.pins += 1
                    got.append((chunk, e))
                    continue
                self.stats.misses += 1
                e = BufferEntry(pins=1)
                self.buffer.insert(key, e)
                got.append((chunk, e))
                if cover is not None and cover(chunk):
                    fresh.append((chunk, e))
                else:
                    fetch.append((h, chunk, e))
                    self.stats.read_requests += 1
                if self.buffer.over_threshold():
                    self.stats.proactive_triggers += 1
                    n = len(self.buffer) - self.buffer.low_water_count()
                    proactive += self._retire(self.buffer.pop_lru(n), proactive=True)
        try:
            if demand:
                self._write_back(demand, background=False)
            if proactive:
                self._write_back(proactive, background=True)
            for chunk, e in fresh:
                pending = self._pending_wb.get((h.region_id, chunk))
                if pending is not None:
                    pending.done.wait()
                e.data = bytearray(h.chunk_bytes(chunk))
                e.ready.set()
            if fetch:
                self._fetch_many(fetch)
            for _, e in got:
                e.ready.wait()
            errors = [e.error for _, e in got if e.error is not None]
            if errors:
                raise errors[0]
        except BaseException:
            self._release(h, got, failed=True)
            raise
        return got

    def _release(self, h: FamHandle, got, failed: bool = False) -> None:
        with self._lock:
            for chunk, e in got:
                e.pins -= 1
                if e.error is not None and e.pins == 0:
                    key = (h.region_id, chunk)
                    if self.buffer.peek(key) is e:
                        del self.buffer.entries[key]
            self._room.notify_all()

    def _check(self, h: FamHandle, offset: int, n: int) -> None:
        if h.region_id not in self.handles:
            raise ProtectionFault(f"region {h.region_id} is not mapped")
        if n <= 0 or offset < 0 or offset + n > h.length:
            raise ProtectionFault(f"access [{offset}, {offset + n}) outside {h.length} bytes")

    def fam_read(self, h: FamHandle, offset: int, n: int) -> bytes:
        self._check(h, offset, n)
        cs = self.chunk_size
        out = bytearray(n)
        first, last = offset // cs, (offset + n - 1) // cs
        chunk = first
        while chunk <= last:
            got = self._acquire(h, range(chunk, min(last, chunk + self.window_chunks - 1) + 1))
            with self._lock:
                for c, e in got:
                    lo = max(offset, c * cs)
                    hi = min(offset + n, (c + 1) * cs)
                    out[lo - offset:hi - offset] = e.data[lo - c * cs:hi - c * cs]
            self._release(h, got)
            chunk += len(got)
        return bytes(out)

    def fam_write(self, h: FamHandle, offset: int, data) -> None:
        if not h.writable:
            raise CoherenceError(f"region {h.region_id} is mapped read-only")
        data = memoryview(bytes(data))
        n = len(data)
        self._check(h, offset, n)
        cs = self.chunk_size

        def covers(c):
            return offset <= c * cs and offset + n >= c * cs + h.chunk_bytes(c)

        first, last = offset // cs, (offset + n - 1) // cs
        chunk = first
        while chunk <= last:
            got = self._acquire(h, range(chunk, min(last, chunk + self.window_chunks - 1) + 1),
                                cover=covers)
            with self._lock:
                for c, e in got:
                    lo = max(offset, c * cs)
                    hi = min(offset + n, (c + 1) * cs)
                    e.data[lo - c * cs:hi - c * cs] = data[lo - offset:hi - offset]
                    e.dirty = True
            self._release(h, got)
            chunk += len(got)

    def evict(self, n: int) -> list[P.WriteRequest]:
        """Evict the ``n`` least recently used chunks.

        Direct mode writes dirty chunks back before returning; offload mode
        hands them to the proxy and returns at once.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        with self._lock:
            items = self._retire(self.buffer.pop_lru(n))
            self._room.notify_all()
        return self._write_back(items, background=False)

    def maybe_proactive_evict(self) -> list[P.WriteRequest]:
        with self._lock:
            if not self.buffer.over_threshold():
                return []
            self.stats.proactive_triggers += 1
            n = len(self.buffer) - self.buffer.low_water_count()
            items = self._retire(self.buffer.pop_lru(n), proactive=True)
            self._room.notify_all()
        return self._write_back(items, background=True)

    def wait_writebacks(self, timeout: Optional[float] = None) -> None:
        with self._lock:
            pending = list(self._pending_wb.values())
        for p in pending:
            if not p.done.wait(timeout):
                raise TimeoutError("write-back not acknowledged")
        if self._wb_errors:
            raise self._wb_errors[0]

    def flush(self) -> int:
        """Write back every dirty chunk and wait for completion."""
        self.wait_writebacks(self.rpc_timeout)
        with self._lock:
            items = []
            for (rid, chunk), e in self.buffer.entries.items():
                h = self.handles.get(rid)
                if h is None or not e.dirty or not e.ready.is_set():
                    continue
                pending = _PendingWrite(bytes(e.data))
                self._pending_wb[(rid, chunk)] = pending
                e.dirty = False
                items.append((h, chunk, pending))
        self._write_back(items, background=False)
        self.wait_writebacks(self.rpc_timeout)
        return len(items)

    def resident(self) -> int:
        return len(self.buffer)

    def close(self) -> None:
        if self._closed:
            return
        try:
            self.flush()
        finally:
            self._closed = True
            self._stop.set()
            self._dispatcher.join(timeout=2)
            self._writer.shutdown(wait=True)
