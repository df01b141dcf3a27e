"""TCP backend for the fabric, for running agents as separate processes.

Every frame on the wire is ``<u32 length><u32 immediate><payload>`` with
``length`` counting the payload only. Agent messages carry their own
immediate and a small routing prefix (sender and destination endpoint ids)
in front of the agent payload. Immediates at or above ``INTERNAL_BASE`` are
reserved for backend traffic that agents never see: endpoint announcements,
one-sided operations and counter queries.

Each process keeps its own :class:`~dpufam.counters.TrafficCounters`.
Traffic is charged where it is initiated, exactly as in the in-process
backend, so the sum over processes equals what a single-process run would
report. :meth:`TcpFabric.collect_counters` merges the local counters with
those of every connected peer.
"""
from __future__ import annotations

import itertools
import json
import logging
import socket
import struct
import threading
from concurrent.futures import Future
from typing import Optional

from . import protocol as P
from .counters import TrafficCounters
from .errors import FamError
from .fabric import DEFAULT_INTRA, DEFAULT_NET, Fabric, LinkProfile, Message, OneSidedOp

log = logging.getLogger(__name__)

FRAME = struct.Struct("<II")
INTERNAL_BASE = 0xFFFFFF00
HELLO = INTERNAL_BASE + 1
ANNOUNCE = INTERNAL_BASE + 2
OP_REQ = INTERNAL_BASE + 3
OP_RESP = INTERNAL_BASE + 4
STATS_REQ = INTERNAL_BASE + 5
STATS_RESP = INTERNAL_BASE + 6

_OP_HEAD = struct.Struct("<QBIQQ")   # op id, kind (0 read, 1 write), rkey, offset, length
_RESP_HEAD = struct.Struct("<QB")    # op id, status (0 ok, 1 error)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host, int(port)


def _pack_str(s: Optional[str]) -> bytes:
    if s is None:
        return b"\xff"
    raw = s.encode()
    if len(raw) >= 0xFF:
        raise FamError("identifier too long")
    return bytes([len(raw)]) + raw


def _unpack_str(buf, pos: int) -> tuple[Optional[str], int]:
    n = buf[pos]
    if n == 0xFF:
        return None, pos + 1
    return bytes(buf[pos + 1:pos + 1 + n]).decode(), pos + 1 + n


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:])
        if k == 0:
            return None
        got += k
    return bytes(buf)


class _Conn:
    """One socket to a peer process; writes are serialised by a lock."""

    def __init__(self, fabric: "TcpFabric", sock: socket.socket, name: str):
        self.fabric = fabric
        self.sock = sock
        self.name = name
        self.remote: dict[str, str] = {}
        self.hello = threading.Event()
        self._wlock = threading.Lock()
        self.closed = False
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.thread = threading.Thread(target=self._read_loop, name=f"tcp-{name}", daemon=True)
        self.thread.start()

    def write(self, imm: int, payload: bytes) -> None:
        frame = FRAME.pack(len(payload), imm) + payload
        with self._wlock:
            self.sock.sendall(frame)

    def _read_loop(self):
        try:
            while True:
                head = _recv_exact(self.sock, FRAME.size)
                if head is None:
                    break
                length, imm = FRAME.unpack(head)
                payload = _recv_exact(self.sock, length) if length else b""
                if payload is None:
                    break
                self.fabric._on_frame(self, imm, payload)
        except OSError:
            pass
        finally:
            self.closed = True
            self.fabric._on_close(self)

    def close(self):
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpFabric(Fabric):
    """Fabric whose endpoints may live in other processes.

    ``listen`` is a ``host:port`` address to accept peers on (port 0 picks a
    free port; see :attr:`address`). :meth:`connect` dials a peer. Endpoint
    ids must be unique across all connected processes.
    """

    def __init__(self, intra: LinkProfile = DEFAULT_INTRA, net: LinkProfile = DEFAULT_NET, *,
                 listen: Optional[str] = None, **kw):
        super().__init__(intra, net, **kw)
        self.conns: list[_Conn] = []
        self.routes: dict[str, _Conn] = {}
        self.remote_nodes: dict[str, str] = {}
        self._ops = itertools.count(1)
        self._waiting: dict[int, tuple[Future, OneSidedOp]] = {}
        self._stats_waiting: dict[int, Future] = {}
        self._route_cv = threading.Condition(self._lock)
        self._server: Optional[socket.socket] = None
        self.address: Optional[str] = None
        if listen is not None:
            host, port = parse_address(listen)
            self._server = socket.create_server((host, port))
            self.address = f"{host}:{self._server.getsockname()[1]}"
            threading.Thread(target=self._accept_loop, name="tcp-accept", daemon=True).start()

    # -- connection management -------------------------------------------------------

    def _accept_loop(self):
        while True:
            try:
                sock, peer = self._server.accept()
            except OSError:
                return
            self._adopt(sock, f"{peer[0]}:{peer[1]}")

    def _adopt(self, sock, name) -> _Conn:
        conn = _Conn(self, sock, name)
        with self._lock:
            self.conns.append(conn)
            local = {eid: ep.node for eid, ep in self.endpoints.items()}
        conn.write(HELLO, json.dumps(local).encode())
        return conn

    def connect(self, address: str, timeout: float = 10.0) -> None:
        """Dial a peer and wait until its endpoints are known."""
        sock = socket.create_connection(parse_address(address), timeout=timeout)
        sock.settimeout(None)
        conn = self._adopt(sock, address)
        if not conn.hello.wait(timeout):
            raise FamError(f"no hello from {address}")

    def wait_for(self, eid: str, timeout: float = 10.0) -> None:
        """Block until endpoint ``eid`` is reachable (local or announced by a peer)."""
        with self._route_cv:
            if not self._route_cv.wait_for(
                    lambda: eid in self.endpoints or eid in self.routes, timeout):
                raise FamError(f"endpoint {eid!r} did not appear")

    def _on_close(self, conn: _Conn):
        with self._lock:
            if conn in self.conns:
                self.conns.remove(conn)
            for eid in [e for e, c in self.routes.items() if c is conn]:
                del self.routes[eid]
                self.remote_nodes.pop(eid, None)
            waiting = [(k, v) for k, v in self._waiting.items()]
        for key, (fut, op) in waiting:
            if op.target not in self.routes and not fut.done():
                self._waiting.pop(key, None)
                fut.set_exception(FamError(f"connection to {op.target!r} lost"))

    def create_endpoint(self, eid: str, node: str, capacity: Optional[int] = None):
        with self._lock:
            if eid in self.routes:
                raise ValueError(f"endpoint {eid!r} already exists on a peer")
        ep = super().create_endpoint(eid, node, capacity)
        payload = json.dumps({eid: node}).encode()
        for conn in list(self.conns):
            conn.write(ANNOUNCE, payload)
        with self._route_cv:
            self._route_cv.notify_all()
        return ep

    # -- hooks used by the base class ----------------------------------------------------

    def _node(self, eid: str) -> str:
        ep = self.endpoints.get(eid)
        if ep is not None:
            return ep.node
        node = self.remote_nodes.get(eid)
        if node is None:
            raise FamError(f"unknown endpoint {eid!r}")
        return node

    def _route(self, eid: str) -> _Conn:
        conn = self.routes.get(eid)
        if conn is None:
            raise FamError(f"unknown endpoint {eid!r}")
        return conn

    def _precheck(self, target, rkey, offset, n):
        if target in self.endpoints:
            super()._precheck(target, rkey, offset, n)

    def _deliver(self, src, dst, msgs):
        if dst in self.endpoints:
            return super()._deliver(src, dst, msgs)
        conn = self._route(dst)
        prefix = _pack_str(src) + _pack_str(dst)
        for payload, imm in msgs:
            if imm >= INTERNAL_BASE:
                raise FamError(f"immediate {imm:#x} is reserved")
            conn.write(imm, prefix + payload)

    def _submit(self, initiator, op, fut):
        if op.target in self.endpoints:
            return super()._submit(initiator, op, fut)
        conn = self._route(op.target)
        key = next(self._ops)
        with self._lock:
            self._waiting[key] = (fut, op)
        kind = 0 if op.kind == "read" else 1
        body = (_OP_HEAD.pack(key, kind, op.rkey, op.offset, op.nbytes)
                + _pack_str(op.target) + _pack_str(op.client)
                + (bytes(op.data) if kind else b""))
        conn.write(OP_REQ, body)

    def _execute(self, op: OneSidedOp):
        if op.target in self.endpoints:
            return super()._execute(op)
        fut: Future = Future()
        self._submit("", op, fut)
        return fut.result()

    # -- receive side ------------------------------------------------------------------

    def _on_frame(self, conn: _Conn, imm: int, payload: bytes):
        if imm < INTERNAL_BASE:
            src, pos = _unpack_str(payload, 0)
            dst, pos = _unpack_str(payload, pos)
            ep = self.endpoints.get(dst)
            if ep is None:
                log.warning("dropping message for unknown endpoint %r", dst)
                return
            ep.receive_queue.put(Message(payload[pos:], imm, src))
        elif imm in (HELLO, ANNOUNCE):
            with self._route_cv:
                for eid, node in json.loads(payload).items():
                    self.routes[eid] = conn
                    self.remote_nodes[eid] = node
                self._route_cv.notify_all()
            if imm == HELLO:
                conn.hello.set()
        elif imm == OP_REQ:
            self._serve_op(conn, payload)
        elif imm == OP_RESP:
            self._complete_op(payload)
        elif imm == STATS_REQ:
            key = struct.unpack_from("<Q", payload)[0]
            body = json.dumps(self.counters.to_records()).encode()
            conn.write(STATS_RESP, struct.pack("<Q", key) + body)
        elif imm == STATS_RESP:
            key = struct.unpack_from("<Q", payload)[0]
            fut = self._stats_waiting.pop(key, None)
            if fut is not None:
                fut.set_result(json.loads(payload[8:]))
        else:
            log.warning("unknown internal frame %#x", imm)

    def _serve_op(self, conn: _Conn, payload: bytes):
        key, kind, rkey, offset, length = _OP_HEAD.unpack_from(payload)
        pos = _OP_HEAD.size
        target, pos = _unpack_str(payload, pos)
        client, pos = _unpack_str(payload, pos)
        try:
            if kind == 0:
                op = OneSidedOp("read", target, rkey, offset, length)
                self._region(target, rkey, offset, length)
                data = bytes(super()._execute(op))
            else:
                op = OneSidedOp("write", target, rkey, offset, data=payload[pos:], client=client)
                self._region(target, rkey, offset, length)
                super()._execute(op)
                data = b""
            conn.write(OP_RESP, _RESP_HEAD.pack(key, 0) + data)
        except Exception as exc:
            err = P.encode_control(P.ErrorReply.from_exception(exc))
            conn.write(OP_RESP, _RESP_HEAD.pack(key, 1) + err)

    def _complete_op(self, payload: bytes):
        key, status = _RESP_HEAD.unpack_from(payload)
        with self._lock:
            item = self._waiting.pop(key, None)
        if item is None:
            return
        fut, op = item
        body = payload[_RESP_HEAD.size:]
        if not fut.set_running_or_notify_cancel():
            return
        if status:
            fut.set_exception(P.decode_control(body).exception())
        elif op.kind == "write":
            fut.set_result(None)
        elif op.into is not None:
            op.into[:len(body)] = body
            fut.set_result(op.into)
        else:
            fut.set_result(body)

    # -- counters ------------------------------------------------------------------------

    def peer_counters(self, timeout: float = 10.0) -> list[TrafficCounters]:
        futs = []
        for conn in list(self.conns):
            key = next(self._ops)
            fut: Future = Future()
            self._stats_waiting[key] = fut
            conn.write(STATS_REQ, struct.pack("<Q", key))
            futs.append(fut)
        return [TrafficCounters.from_records(f.result(timeout)) for f in futs]

    def collect_counters(self, timeout: float = 10.0) -> TrafficCounters:
        """Local counters merged with those of every directly connected peer."""
        total = TrafficCounters()
        total.merge(self.counters)
        for c in self.peer_counters(timeout):
            total.merge(c)
        return total

    def close(self) -> None:
        super().close()
        if self._server is not None:
            self._server.close()
        for conn in list(self.conns):
            conn.close()
