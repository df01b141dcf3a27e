"""Proxy agent modelling the DPU.

Stage A drains the shared receive queue into task batches, resolves each
request against the region directory and the caches, and posts every
memory-node operation of the batch under one doorbell. Stage B waits for
completions in order and stages data back to the requesting host. The two
stages run on separate threads joined by a bounded work queue.
"""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Optional

from . import protocol as P
from .counters import BACKGROUND, ON_DEMAND, SHARED
from .dpu_cache import DynamicCache, StaticCache, required_hit_rate
from .errors import AllocationError, CoherenceError, ConfigError, FamError, ProtectionFault, UnknownRegion
from .fabric import OneSidedOp

log = logging.getLogger(__name__)

MiB = 1 << 20
GiB = 1 << 30
CACHE_MODES = ("off", "static", "dynamic", "static+dynamic")


@dataclass
class ProxyConfig:
    endpoint: str = "dpu0"
    net_endpoint: str = "dpu0-net"
    memory: str = "mem0"
    chunk_size: int = 64 * 1024
    aggregation: bool = True
    max_batch: int = 32
    pipeline: bool = True
    queue_depth: int = 256
    cache_mode: str = "off"
    dpu_memory: int = GiB
    cache_bytes: Optional[int] = None
    entry_bytes: int = MiB
    prefetch_degree: int = 1
    hit_window: int = 1024
    hysteresis: float = 0.05
    adaptive: bool = True
    seed: int = 0
    # Regions eligible for dynamic caching; None means every non-static region.
    dynamic_regions: Optional[set] = None
    rpc_timeout: float = 60.0

    def __post_init__(self):
        if self.cache_mode not in CACHE_MODES:
            raise ConfigError(f"cache_mode must be one of {CACHE_MODES}")
        if self.max_batch < 1 or self.queue_depth < 1:
            raise ConfigError("max_batch and queue_depth must be positive")

    @property
    def dynamic(self) -> bool:
        return "dynamic" in self.cache_mode

    @property
    def static(self) -> bool:
        return "static" in self.cache_mode


@dataclass(frozen=True)
class DirEntry:
    memory: str
    rkey: int
    length: int
    writer: Optional[str] = None


@dataclass
class TaskBatch:
    messages: list
    state: list = field(default_factory=list)

    def __len__(self):
        return len(self.messages)


def aggregate(endpoint, max_batch: int, enabled: bool = True,
              timeout: Optional[float] = None) -> Optional[TaskBatch]:
    """Block for one request, then take whatever else is already queued.

    Never waits for more requests to arrive; with aggregation disabled every
    batch holds exactly one request.
    """
    try:
        first = endpoint.recv(timeout=timeout)
    except queue.Empty:
        return None
    rest = endpoint.drain(max_batch - 1) if enabled else []
    return TaskBatch([first] + rest)


@dataclass
class ProxyStats:
    requests: int = 0
    reads: int = 0
    writes: int = 0
    batches: int = 0
    max_batch_seen: int = 0
    responses: int = 0
    errors: int = 0
    server_reads: int = 0
    server_writes: int = 0
    static_hits: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    rejected_on_shutdown: int = 0
    intermediate_copies: int = 0


@dataclass
class _Work:
    kind: str  # read | write | reply
    client: str
    reqs: list
    future: Optional[object] = None
    view: Optional[memoryview] = None
    slot: Optional[int] = None
    region: Optional[int] = None
    chunks: tuple = ()
    reply: Optional[tuple] = None


class ProxyAgent:
    def __init__(self, fabric, config: Optional[ProxyConfig] = None):
        self.fabric = fabric
        self.config = cfg = config or ProxyConfig()
        self.endpoint = fabric.create_endpoint(cfg.endpoint, "dpu")
        self.net = fabric.create_endpoint(cfg.net_endpoint, "dpu")
        self.directory: dict[int, DirEntry] = {}
        self.sessions: set[str] = set()
        self.stats = ProxyStats()
        self._stats_lock = threading.Lock()
        self._rpc_lock = threading.Lock()
        self._work: "queue.Queue[Optional[_Work]]" = queue.Queue(maxsize=cfg.queue_depth)
        self._running = threading.Event()
        self._stage_a: Optional[threading.Thread] = None
        self._stage_b: Optional[threading.Thread] = None

        cache_bytes = cfg.cache_bytes
        if cache_bytes is None:
            # with both caches on, the dynamic one gets half the budget
            cache_bytes = cfg.dpu_memory // 2 if cfg.static else cfg.dpu_memory
        reserved = cache_bytes if cfg.dynamic else 0
        if reserved > cfg.dpu_memory:
            raise ConfigError("dynamic cache larger than DPU memory budget")
        self.static_cache = StaticCache(cfg.dpu_memory - reserved)
        self.dynamic: Optional[DynamicCache] = None
        if cfg.dynamic:
            need = required_hit_rate(fabric.links["net"].bandwidth_bytes_per_sec,
                                     fabric.links["intra"].bandwidth_bytes_per_sec)
            self.dynamic = DynamicCache(
                self._fetch_group, cache_bytes=cache_bytes, entry_bytes=cfg.entry_bytes,
                chunk_size=cfg.chunk_size, prefetch_degree=cfg.prefetch_degree,
                hit_window=cfg.hit_window, hysteresis=cfg.hysteresis, required=need,
                seed=cfg.seed, adaptive=cfg.adaptive)

    def _bump(self, **kw):
        with self._stats_lock:
            for k, v in kw.items():
                setattr(self.stats, k, getattr(self.stats, k) + v)

    # -- lifecycle ----------------------------------------------------------------------

    def start(self) -> "ProxyAgent":
        self._running.set()
        self._stage_a = threading.Thread(target=self._run_stage_a, name="dpu-stage-a",
                                         daemon=True)
        self._stage_a.start()
        if self.config.pipeline:
            self._stage_b = threading.Thread(target=self._run_stage_b, name="dpu-stage-b",
                                             daemon=True)
            self._stage_b.start()
        if self.dynamic is not None:
            self.dynamic.start()
        return self

    def stop(self) -> None:
        """Stop intake; finish in-flight work; reject whatever is still queued."""
        self._running.clear()
        if self._stage_a is not None:
            self._stage_a.join()
        if self._stage_b is not None:
            self._work.put(None)
            self._stage_b.join()
        while True:
            m = self.endpoint.try_recv()
            if m is None:
                break
            self._reject(m, FamError("proxy shutting down"))
            self._bump(rejected_on_shutdown=1)
        if self.dynamic is not None:
            self.dynamic.stop()

    # -- stage A ------------------------------------------------------------------------------

    def _run_stage_a(self):
        cfg = self.config
        while self._running.is_set():
            batch = aggregate(self.endpoint, cfg.max_batch, cfg.aggregation, timeout=0.05)
            if batch is None:
                continue
            try:
                self.process_batch(batch)
            except Exception:
                log.exception("stage A failed on a batch of %d", len(batch))

    def process_batch(self, batch: TaskBatch) -> None:
        cfg = self.config
        self._bump(batches=1, requests=len(batch))
        with self._stats_lock:
            self.stats.max_batch_seen = max(self.stats.max_batch_seen, len(batch))
        items: list[_Work] = []
        ops: list[tuple[_Work, OneSidedOp]] = []
        writes: dict[tuple[str, int], list] = {}
        for m in batch.messages:
            try:
                if m.imm == P.Imm.CONTROL:
                    reply = self._control(m.sender, P.decode_control(m.payload))
                    items.append(_Work("reply", m.sender, [], reply=(
                        P.encode_control(reply), P.Imm.CONTROL)))
                elif m.imm == P.Imm.READ:
                    self._bump(reads=1)
                    self._stage_read(m.sender, P.decode_read(m.payload), items, ops)
                elif m.imm == P.Imm.WRITE:
                    self._bump(writes=1)
                    req = P.decode_write(m.payload)
                    self._validate(req.region_id, req.page_offset, req.size)
                    writes.setdefault((m.sender, req.region_id), []).append(req)
                else:
                    raise P.DecodeError(f"unexpected immediate {m.imm}")
            except Exception as exc:
                items.append(self._error_item(m, exc))
        for (client, rid), reqs in writes.items():
            for run in coalesce_writes(reqs, cfg.chunk_size):
                self._stage_write(client, rid, run, items, ops)
        if ops:
            self._post(ops)
        for item in items:
            if cfg.pipeline:
                self._work.put(item)
            else:
                self._complete(item)

    def _post(self, ops):
        net_ops = [op for _, op in ops]
        if self.config.aggregation:
            futures = self.fabric.post(self.net.id, net_ops)
        else:
            futures = [self.fabric.post(self.net.id, [op])[0] for op in net_ops]
        for (item, _), fut in zip(ops, futures):
            item.future = fut

    def _validate(self, rid: int, page_offset: int, size: int) -> DirEntry:
        entry = self.directory.get(rid)
        if entry is None:
            raise UnknownRegion(f"unknown region {rid}")
        off = page_offset * self.config.chunk_size
        if size <= 0 or off + size > entry.length:
            raise ProtectionFault(f"request [{off}, {off + size}) outside region {rid}")
        return entry

    def _stage_read(self, client, req: P.ReadRequest, items, ops):
        entry = self._validate(req.region_id, req.page_offset, req.size)
        view = self.static_cache.lookup(req.region_id, req.page_offset, req.size)
        if view is not None:
            self._bump(static_hits=1)
            items.append(_Work("read", client, [req], view=view, region=req.region_id))
            return
        dyn = self.dynamic
        if dyn is not None and self._dynamic_eligible(req.region_id):
            hit = dyn.lookup(req.region_id, req.page_offset, req.size)
            if hit is not None:
                self._bump(cache_hits=1)
                slot, view = hit
                items.append(_Work("read", client, [req], view=view, slot=slot,
                                   region=req.region_id))
                return
            self._bump(cache_misses=1)
        # Receive into one staging buffer that is also the send source.
        buf = memoryview(bytearray(req.size))
        item = _Work("read", client, [req], view=buf, region=req.region_id)
        op = OneSidedOp("read", entry.memory, entry.rkey, req.page_offset * self.config.chunk_size,
                        req.size, into=buf, tclass=ON_DEMAND, client=client,
                        region=req.region_id)
        self._bump(server_reads=1)
        items.append(item)
        ops.append((item, op))

    def _dynamic_eligible(self, rid: int) -> bool:
        if rid in self.static_cache.regions:
            return False
        allowed = self.config.dynamic_regions
        return allowed is None or rid in allowed

    def _stage_write(self, client, rid, run, items, ops):
        entry = self.directory[rid]
        first = run[0].page_offset
        n_chunks = sum(-(-r.size // self.config.chunk_size) for r in run)
        if self.dynamic is not None:
            self.dynamic.invalidate(rid, first, n_chunks)
        data = b"".join(r.data for r in run)
        item = _Work("write", client, run, region=rid, chunks=(first, n_chunks))
        op = OneSidedOp("write", entry.memory, entry.rkey, first * self.config.chunk_size,
                        data=data, tclass=ON_DEMAND, client=client, region=rid)
        self._bump(server_writes=1)
        items.append(item)
        ops.append((item, op))

    def _error_item(self, m, exc) -> _Work:
        log.debug("error for %s: %s", m.sender, exc)
        return _Work("reply", m.sender, [], reply=self._error_message(m, exc))

    def _error_message(self, m, exc) -> tuple:
        if m.imm == P.Imm.READ and len(m.payload) == P.READ_REQUEST_BYTES:
            key, kind = P.decode_read(m.payload).dest_addr, P.Imm.READ
        elif m.imm == P.Imm.WRITE and len(m.payload) >= 8:
            key, kind = int.from_bytes(m.payload[:8], "little"), P.Imm.WRITE
        elif m.imm == P.Imm.CONTROL:
            return P.encode_control(P.ErrorReply.from_exception(exc)), P.Imm.CONTROL
        else:
            key, kind = 0, P.Imm.READ
        return P.encode_error(kind, key, exc), P.Imm.ERROR

    def _reject(self, m, exc) -> None:
        payload, imm = self._error_message(m, exc)
        self.fabric.send(self.endpoint.id, m.sender, payload, imm, client=m.sender)
        self._bump(responses=1, errors=1)

    # -- stage B ---------------------------------------------------------------------------------

    def _run_stage_b(self):
        while True:
            item = self._work.get()
            if item is None:
                return
            try:
                self._complete(item)
            except Exception:
                log.exception("stage B failed")

    def _complete(self, item: _Work) -> None:
        send = self.fabric.send
        me = self.endpoint.id
        if item.kind == "reply":
            payload, imm = item.reply
            tclass = BACKGROUND if imm == P.Imm.CONTROL else ON_DEMAND
            send(me, item.client, payload, imm, tclass=tclass, client=item.client)
            self._bump(responses=1, errors=int(imm == P.Imm.ERROR))
            return
        exc = None
        if item.future is not None:
            try:
                item.future.result(timeout=self.config.rpc_timeout)
            except Exception as e:
                exc = e
        if item.kind == "read":
            req = item.reqs[0]
            try:
                if exc is not None:
                    send(me, item.client, P.encode_error(P.Imm.READ, req.dest_addr, exc),
                         P.Imm.ERROR, client=item.client, region=item.region)
                else:
                    send(me, item.client, P.encode_read_response(req.dest_addr, item.view),
                         P.Imm.READ, client=item.client, region=item.region)
            finally:
                if item.slot is not None:
                    self.dynamic.release(item.slot)
            self._bump(responses=1, errors=int(exc is not None))
            return
        # write-back run
        rid = item.region
        if exc is None:
            first, n = item.chunks
            if self.dynamic is not None:
                self.dynamic.invalidate(rid, first, n)
            for r in item.reqs:
                self.static_cache.update(rid, r.page_offset, r.data)
        for r in item.reqs:
            if exc is None:
                payload, imm = P.encode_write_ack(r.region_id, r.page_offset, r.size), P.Imm.WRITE
            else:
                payload = P.encode_error(P.Imm.WRITE, P.pack_word0(r.region_id, r.page_offset), exc)
                imm = P.Imm.ERROR
            send(me, item.client, payload, imm, client=item.client, region=rid)
            self._bump(responses=1, errors=int(exc is not None))

    # -- control plane -------------------------------------------------------------------------------

    def _memory_rpc(self, msg: P.ControlMessage) -> P.ControlMessage:
        with self._rpc_lock:
            self.fabric.send(self.net.id, self.config.memory, P.encode_control(msg),
                             P.Imm.CONTROL, tclass=BACKGROUND,
                             client=getattr(msg, "client", None))
            while True:
                m = self.net.recv(timeout=self.config.rpc_timeout)
                if m.imm == P.Imm.CONTROL:
                    return P.decode_control(m.payload)

    def _control(self, client: str, msg: P.ControlMessage) -> P.ControlMessage:
        try:
            if isinstance(msg, P.Setup):
                self.sessions.add(msg.client)
                return P.SetupAck()
            if isinstance(msg, (P.AllocRegion, P.MapRegion)):
                reply = self._memory_rpc(msg)
                if isinstance(reply, P.AllocAck):
                    prev = self.directory.get(reply.region_id)
                    writer = prev.writer if prev else None
                    if msg.writable:
                        writer = msg.client
                    self.directory[reply.region_id] = DirEntry(
                        reply.memory, reply.rkey, reply.length, writer)
                return reply
            if isinstance(msg, P.FreeRegion):
                reply = self._memory_rpc(msg)
                if isinstance(reply, P.FreeAck):
                    self.directory.pop(msg.region_id, None)
                    self.static_cache.drop(msg.region_id)
                    if self.dynamic is not None:
                        self.dynamic.drop_region(msg.region_id)
                return reply
            if isinstance(msg, P.StaticLoad):
                self.static_load(msg.region_id, msg.first_chunk, msg.n_chunks, client=client)
                return P.StaticAck(msg.region_id, msg.first_chunk, msg.n_chunks)
            return P.ErrorReply(99, f"unsupported control message {type(msg).__name__}")
        except Exception as exc:
            return P.ErrorReply.from_exception(exc)

    # -- caches ----------------------------------------------------------------------------------------

    def static_load(self, region_id: int, first_chunk: int, n_chunks: int,
                    client: Optional[str] = None) -> int:
        """Read a chunk range once and pin it; returns bytes loaded."""
        if not self.config.static:
            raise ConfigError("static caching is off")
        entry = self.directory.get(region_id)
        if entry is None:
            raise UnknownRegion(f"unknown region {region_id}")
        if region_id in self.static_cache.regions:
            raise AllocationError(f"region {region_id} already statically cached")
        cs = self.config.chunk_size
        off = first_chunk * cs
        nbytes = min(n_chunks * cs, entry.length - off)
        if n_chunks <= 0 or nbytes <= 0:
            raise ProtectionFault("empty static range")
        self.static_cache.reserve(nbytes)
        try:
            buf = bytearray(nbytes)
            op = OneSidedOp("read", entry.memory, entry.rkey, off, nbytes, into=memoryview(buf),
                            tclass=BACKGROUND, client=client, region=region_id)
            self.fabric.post(self.net.id, [op])[0].result(timeout=self.config.rpc_timeout)
        except BaseException:
            self.static_cache.unreserve(nbytes)
            raise
        if self.dynamic is not None:
            self.dynamic.drop_region(region_id)
        self.static_cache.add(region_id, first_chunk, n_chunks, cs, buf)
        return nbytes

    def _fetch_group(self, region_id: int, byte_offset: int, into: memoryview) -> int:
        entry = self.directory.get(region_id)
        if entry is None:
            return 0
        n = min(len(into), entry.length - byte_offset)
        if n <= 0:
            return 0
        op = OneSidedOp("read", entry.memory, entry.rkey, byte_offset, n, into=into[:n],
                        tclass=BACKGROUND, client=SHARED, region=region_id)
        self.fabric.post(self.net.id, [op])[0].result(timeout=self.config.rpc_timeout)
        return n


def coalesce_writes(reqs: list, chunk_size: int) -> list[list]:
    """Group write-backs into runs of adjacent full chunks.

    A run continues while the next request starts at the chunk right after
    the previous one and the previous one covered its chunk fully.
    """
    ordered = sorted(reqs, key=lambda r: r.page_offset)
    runs: list[list] = []
    for r in ordered:
        if runs:
            last = runs[-1][-1]
            if r.page_offset == last.page_offset + 1 and last.size == chunk_size:
                runs[-1].append(r)
                continue
            if r.page_offset == last.page_offset:
                # Same chunk twice in one batch: keep send order, no merging.
                runs.append([r])
                continue
        runs.append([r])
    return runs
