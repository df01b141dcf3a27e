"""Memory-node agent: reserves and frees regions, nothing else.

Data access is passive: regions are registered with the fabric and peers use
one-sided reads and writes against them. The only hook the agent keeps on the
data path is the single-writer check on writes.
"""
from __future__ import annotations

import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Optional

from . import protocol as P
from .counters import BACKGROUND
from .errors import AllocationError, CoherenceError, ProtectionFault, UnknownRegion

log = logging.getLogger(__name__)

GiB = 1 << 30
DEFAULT_CAPACITY = 256 * GiB
DEFAULT_CHUNK = 64 * 1024
_PAGE = 64 * 1024


class SparseStore:
    """Lazily materialised zero-filled byte store."""

    def __init__(self, length: int, page: int = _PAGE):
        self.length = length
        self.page = page
        self.pages: dict[int, bytearray] = {}

    def _spans(self, offset: int, n: int):
        end = offset + n
        while offset < end:
            p, lo = divmod(offset, self.page)
            hi = min(self.page, lo + end - offset)
            yield p, lo, hi
            offset += hi - lo

    def read(self, offset: int, n: int) -> bytes:
        out = bytearray(n)
        self.readinto(offset, memoryview(out))
        return bytes(out)

    def readinto(self, offset: int, out) -> None:
        pos = 0
        for p, lo, hi in self._spans(offset, len(out)):
            pg = self.pages.get(p)
            if pg is None:
                out[pos:pos + hi - lo] = bytes(hi - lo)
            else:
                out[pos:pos + hi - lo] = pg[lo:hi]
            pos += hi - lo

    def write(self, offset: int, data) -> None:
        data = memoryview(bytes(data))
        pos = 0
        for p, lo, hi in self._spans(offset, len(data)):
            pg = self.pages.get(p)
            if pg is None:
                pg = self.pages[p] = bytearray(self.page)
            pg[lo:hi] = data[pos:pos + hi - lo]
            pos += hi - lo

    @property
    def materialized(self) -> int:
        return len(self.pages) * self.page


@dataclass
class FamRegion:
    region_id: int
    length: int
    rkey: int
    backing: SparseStore = field(repr=False)
    source_file: Optional[str] = None
    writer: Optional[str] = None


class MemoryAgent:
    def __init__(self, fabric, endpoint_id: str = "mem0", *, capacity: int = DEFAULT_CAPACITY,
                 data_dir: Optional[str] = None, chunk_size: int = DEFAULT_CHUNK):
        self.fabric = fabric
        self.id = endpoint_id
        self.capacity = capacity
        self.data_dir = data_dir
        self.chunk_size = chunk_size
        self.endpoint = fabric.create_endpoint(endpoint_id, "mem", capacity=capacity)
        self.regions: dict[int, FamRegion] = {}
        self._lock = threading.Lock()
        self._next_id = 1
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    @property
    def used(self) -> int:
        return sum(r.length for r in self.regions.values())

    # -- allocation ---------------------------------------------------------------

    def _fresh_id(self) -> int:
        for _ in range(0xFFFF):
            rid = self._next_id
            self._next_id = rid % 0xFFFF + 1
            if rid not in self.regions:
                return rid
        raise AllocationError("region id space exhausted")

    def _resolve(self, path: str) -> str:
        if self.data_dir and not os.path.isabs(path):
            return os.path.join(self.data_dir, path)
        return path

    def alloc_region(self, length: int, file: Optional[str] = None,
                     writer: Optional[str] = None) -> tuple[int, int]:
        if length <= 0:
            raise AllocationError("length must be positive")
        store = SparseStore(length)
        if file is not None:
            path = self._resolve(file)
            if not os.path.isfile(path):
                raise AllocationError(f"file not found: {file}")
            with open(path, "rb") as fh:
                data = fh.read(length)
            if data:
                store.write(0, data)
        with self._lock:
            rid = self._fresh_id()
            region = self.fabric.register_region(self.id, length, store=store,
                                                 guard=self._writer_guard(rid))
            self.regions[rid] = FamRegion(rid, length, region.rkey, store, file, writer)
        log.debug("alloc region %d (%d bytes, file=%s, writer=%s)", rid, length, file, writer)
        return rid, region.rkey

    def map_region(self, region_id: int, client: str, writable: bool) -> FamRegion:
        with self._lock:
            region = self._get(region_id)
            if writable:
                if region.writer is None:
                    region.writer = client
                elif region.writer != client:
                    raise CoherenceError(
                        f"region {region_id} already writable by {region.writer!r}")
            return region

    def free_region(self, region_id: int) -> None:
        with self._lock:
            region = self.regions.pop(region_id, None)
            if region is None:
                raise UnknownRegion(f"unknown region {region_id}")
            self.fabric.deregister_region(self.id, region.rkey)

    def _get(self, region_id: int) -> FamRegion:
        try:
            return self.regions[region_id]
        except KeyError:
            raise UnknownRegion(f"unknown region {region_id}") from None

    def _writer_guard(self, region_id: int):
        def guard(client):
            region = self.regions.get(region_id)
            if region is None:
                raise ProtectionFault(f"region {region_id} freed")
            if region.writer is None or client != region.writer:
                raise CoherenceError(
                    f"client {client!r} is not the writer of region {region_id}")
        return guard

    # -- passive data path ---------------------------------------------------------

    def serve_read(self, region_id: int, chunk_index: int, size: int) -> bytes:
        region = self._get(region_id)
        off = chunk_index * self.chunk_size
        if size <= 0 or off + size > region.length:
            raise ProtectionFault("read outside region")
        return region.backing.read(off, size)

    def serve_write(self, region_id: int, chunk_index: int, data, client: Optional[str]) -> None:
        region = self._get(region_id)
        off = chunk_index * self.chunk_size
        if not data or off + len(data) > region.length:
            raise ProtectionFault("write outside region")
        self._writer_guard(region_id)(client)
        region.backing.write(off, data)

    def contents(self, region_id: int) -> bytes:
        region = self._get(region_id)
        return region.backing.read(0, region.length)

    # -- control plane ----------------------------------------------------------------

    def handle_control(self, msg: P.ControlMessage) -> P.ControlMessage:
        try:
            if isinstance(msg, P.AllocRegion):
                rid, rkey = self.alloc_region(msg.length, msg.file,
                                              writer=msg.client if msg.writable else None)
                return P.AllocAck(rid, rkey, msg.length, self.id)
            if isinstance(msg, P.MapRegion):
                r = self.map_region(msg.region_id, msg.client, msg.writable)
                return P.AllocAck(r.region_id, r.rkey, r.length, self.id)
            if isinstance(msg, P.FreeRegion):
                self.free_region(msg.region_id)
                return P.FreeAck(msg.region_id)
            if isinstance(msg, P.Setup):
                return P.SetupAck()
            return P.ErrorReply(99, f"unsupported control message {type(msg).__name__}")
        except Exception as exc:
            return P.ErrorReply.from_exception(exc)

    def start(self) -> "MemoryAgent":
        self._thread = threading.Thread(target=self._serve, name=f"memagent-{self.id}",
                                        daemon=True)
        self._thread.start()
        return self

    def _serve(self):
        while not self._stop.is_set():
            try:
                m = self.endpoint.recv(timeout=0.05)
            except queue.Empty:
                continue
            if m.imm != P.Imm.CONTROL:
                log.warning("memory agent ignores data-plane message imm=%d from %s",
                            m.imm, m.sender)
                continue
            try:
                reply = self.handle_control(P.decode_control(m.payload))
            except Exception as exc:
                reply = P.ErrorReply.from_exception(exc)
            self.fabric.send(self.id, m.sender, P.encode_control(reply), P.Imm.CONTROL,
                             tclass=BACKGROUND)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
