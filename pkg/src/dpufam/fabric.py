"""In-process simulated fabric: two links, one-sided and two-sided operations.

Endpoints live on one of three node kinds (``host``, ``dpu``, ``mem``). Traffic
between a host and the DPU crosses the ``intra`` link; anything touching a
memory node crosses ``net``. Every operation is charged to a
:class:`~dpufam.counters.TrafficCounters` cell with a fixed header overhead;
a doorbell batch pays that overhead once.
"""
from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from concurrent.futures import Future
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .counters import ON_DEMAND, TrafficCounters
from .errors import AllocationError, FamError, MessageTooLarge, ProtectionFault

log = logging.getLogger(__name__)

HEADER_BYTES = 64
MAX_MESSAGE = 1 << 20
NODE_KINDS = ("host", "dpu", "mem")


@dataclass(frozen=True)
class LinkProfile:
    name: str
    bandwidth_bytes_per_sec: float
    latency_sec: float = 0.0

    def __post_init__(self):
        if self.name not in ("intra", "net"):
            raise ValueError(f"link name must be intra or net, got {self.name!r}")
        if not self.bandwidth_bytes_per_sec > 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_sec < 0:
            raise ValueError("latency must be non-negative")

    def transfer_time(self, nbytes: int) -> float:
        return self.latency_sec + nbytes / self.bandwidth_bytes_per_sec


# Defaults keep B_net / B_intra = 1/2, the testbed ratio.
DEFAULT_INTRA = LinkProfile("intra", 12.6e9, 1.5e-6)
DEFAULT_NET = LinkProfile("net", 6.3e9, 3.0e-6)


def link_between(a: str, b: str) -> str:
    return "net" if "mem" in (a, b) else "intra"


class ByteStore:
    """Plain zero-initialised backing for a registered region."""

    def __init__(self, length: int):
        self.buf = bytearray(length)

    def read(self, offset: int, n: int) -> bytes:
        return bytes(self.buf[offset:offset + n])

    def readinto(self, offset: int, out) -> None:
        out[:] = self.buf[offset:offset + len(out)]

    def write(self, offset: int, data) -> None:
        self.buf[offset:offset + len(data)] = data


@dataclass
class RegisteredRegion:
    rkey: int
    base: int
    length: int
    owner: str
    store: object = field(repr=False)
    # Optional owner hook run before every one-sided write: guard(client).
    guard: Optional[Callable[[Optional[str]], None]] = field(default=None, repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


@dataclass(frozen=True)
class Message:
    payload: bytes
    imm: int
    sender: str


@dataclass
class OneSidedOp:
    """A one-sided operation handed to :meth:`Fabric.post`."""

    kind: str  # "read" | "write"
    target: str
    rkey: int
    offset: int
    length: int = 0
    data: Optional[bytes] = None
    into: Optional[memoryview] = None
    tclass: str = ON_DEMAND
    client: Optional[str] = None
    region: Optional[int] = None

    @property
    def nbytes(self) -> int:
        return len(self.data) if self.kind == "write" else self.length


class Endpoint:
    def __init__(self, eid: str, node: str, capacity: Optional[int] = None):
        if node not in NODE_KINDS:
            raise ValueError(f"node kind must be one of {NODE_KINDS}")
        self.id = eid
        self.node = node
        self.capacity = capacity
        self.used = 0
        self.receive_queue: "queue.Queue[Message]" = queue.Queue()
        self.regions: dict[int, RegisteredRegion] = {}

    def recv(self, timeout: Optional[float] = None) -> Message:
        """Block for the next message; raises ``queue.Empty`` on timeout."""
        return self.receive_queue.get(timeout=timeout)

    def try_recv(self) -> Optional[Message]:
        try:
            return self.receive_queue.get_nowait()
        except queue.Empty:
            return None

    def drain(self, limit: int) -> list[Message]:
        out = []
        while len(out) < limit:
            m = self.try_recv()
            if m is None:
                break
            out.append(m)
        return out

    def pending(self) -> int:
        return self.receive_queue.qsize()

    def __repr__(self):
        return f"Endpoint({self.id!r}, {self.node!r})"


class _Engine:
    """Per-initiator completion engine; executes posted ops in FIFO order."""

    def __init__(self, fabric: "Fabric", name: str):
        self.fabric = fabric
        self.q: "queue.Queue" = queue.Queue()
        self.thread = threading.Thread(target=self._run, name=f"nic-{name}", daemon=True)
        self.thread.start()

    def _run(self):
        while True:
            item = self.q.get()
            if item is None:
                return
            op, fut = item
            self.fabric._gate.wait()
            if not fut.set_running_or_notify_cancel():
                continue
            try:
                fut.set_result(self.fabric._execute(op))
            except BaseException as exc:  # delivered through the future
                fut.set_exception(exc)


class Fabric:
    """In-process backend.

    ``header_bytes`` is charged per message / one-sided op (once per batch),
    ``pace=True`` sleeps for the modeled transfer time on two-sided sends.
    """

    def __init__(self, intra: LinkProfile = DEFAULT_INTRA, net: LinkProfile = DEFAULT_NET, *,
                 header_bytes: int = HEADER_BYTES, max_message: int = MAX_MESSAGE,
                 qp_count: int = 4, pace: bool = False,
                 counters: Optional[TrafficCounters] = None):
        self.links = {"intra": intra, "net": net}
        self.header_bytes = header_bytes
        self.max_message = max_message
        self.qp_count = qp_count
        self.pace = pace
        self.counters = counters if counters is not None else TrafficCounters()
        self.endpoints: dict[str, Endpoint] = {}
        self._rkeys = itertools.count(1)
        self._lock = threading.Lock()
        self._engines: dict[str, _Engine] = {}
        self._gate = threading.Event()
        self._gate.set()

    # -- setup ------------------------------------------------------------------

    def create_endpoint(self, eid: str, node: str, capacity: Optional[int] = None) -> Endpoint:
        with self._lock:
            if eid in self.endpoints:
                raise ValueError(f"endpoint {eid!r} already exists")
            ep = Endpoint(eid, node, capacity)
            self.endpoints[eid] = ep
            return ep

    def endpoint(self, eid: str) -> Endpoint:
        try:
            return self.endpoints[eid]
        except KeyError:
            raise FamError(f"unknown endpoint {eid!r}") from None

    def register_region(self, eid: str, length: int, store=None, guard=None) -> RegisteredRegion:
        if length <= 0:
            raise AllocationError("region length must be positive")
        ep = self.endpoint(eid)
        with self._lock:
            if ep.capacity is not None and ep.used + length > ep.capacity:
                raise AllocationError(
                    f"endpoint {eid!r}: {length} bytes exceeds remaining capacity "
                    f"{ep.capacity - ep.used}")
            rkey = next(self._rkeys) & 0xFFFFFFFF
            region = RegisteredRegion(rkey, 0, length, eid,
                                      store if store is not None else ByteStore(length), guard)
            ep.regions[rkey] = region
            ep.used += length
            return region

    def deregister_region(self, eid: str, rkey: int) -> None:
        ep = self.endpoint(eid)
        with self._lock:
            region = ep.regions.pop(rkey, None)
            if region is None:
                raise ProtectionFault(f"unknown rkey {rkey} on {eid!r}")
            ep.used -= region.length

    def _node(self, eid: str) -> str:
        return self.endpoint(eid).node

    def _precheck(self, target: str, rkey: int, offset: int, n: int) -> None:
        self._region(target, rkey, offset, n)

    def _region(self, target: str, rkey: int, offset: int, n: int) -> RegisteredRegion:
        region = self.endpoint(target).regions.get(rkey)
        if region is None:
            raise ProtectionFault(f"unknown rkey {rkey} on {target!r}")
        if offset < 0 or n < 0 or offset + n > region.length:
            raise ProtectionFault(
                f"access [{offset}, {offset + n}) outside region of {region.length} bytes")
        return region

    # -- accounting -------------------------------------------------------------

    def _charge(self, a: str, b: str, sizes: Sequence[int], tags: Sequence[tuple]) -> float:
        """Charge one doorbell carrying ``len(sizes)`` operations.

        The fixed overhead lands on the first operation's cell.
        """
        link = link_between(self._node(a), self._node(b))
        profile = self.links[link]
        total = sum(sizes) + self.header_bytes
        elapsed = profile.transfer_time(total)
        for i, (size, (tclass, client, region)) in enumerate(zip(sizes, tags)):
            first = i == 0
            self.counters.charge(
                link, tclass, client, region, size, self.header_bytes if first else 0,
                messages=1, batches=1 if first else 0,
                modeled_time=elapsed if first else 0.0)
        return elapsed

    def modeled_cost(self, link: str, sizes: Sequence[int]) -> float:
        """Modeled time of one doorbell batch carrying ``sizes`` payloads."""
        return self.links[link].transfer_time(sum(sizes) + self.header_bytes)

    # -- one-sided ----------------------------------------------------------------

    def _execute(self, op: OneSidedOp):
        region = self._region(op.target, op.rkey, op.offset, op.nbytes)
        if op.kind == "read":
            with region.lock:
                if op.into is not None:
                    region.store.readinto(op.offset, op.into)
                    return op.into
                return region.store.read(op.offset, op.length)
        if op.kind == "write":
            if region.guard is not None:
                region.guard(op.client)
            with region.lock:
                region.store.write(op.offset, op.data)
            return None
        raise ValueError(f"unknown op kind {op.kind!r}")

    def one_sided_read(self, initiator: str, target: str, rkey: int, offset: int, length: int,
                       *, tclass: str = ON_DEMAND, client: Optional[str] = None,
                       region: Optional[int] = None, into=None) -> bytes:
        op = OneSidedOp("read", target, rkey, offset, length, into=into,
                        tclass=tclass, client=client, region=region)
        self._precheck(target, rkey, offset, length)
        self._charge(initiator, target, [length], [(tclass, client, region)])
        return self._execute(op)

    def one_sided_write(self, initiator: str, target: str, rkey: int, offset: int, data,
                        *, tclass: str = ON_DEMAND, client: Optional[str] = None,
                        region: Optional[int] = None) -> None:
        data = bytes(data)
        op = OneSidedOp("write", target, rkey, offset, data=data,
                        tclass=tclass, client=client, region=region)
        self._precheck(target, rkey, offset, len(data))
        self._charge(initiator, target, [len(data)], [(tclass, client, region)])
        self._execute(op)

    def post(self, initiator: str, ops: Sequence[OneSidedOp]) -> list[Future]:
        """Post ops under one doorbell; completions arrive through futures.

        Ops from one initiator execute in post order. Bounds are checked at
        completion time, so a fault surfaces on the op's future.
        """
        if not ops:
            raise ValueError("empty batch")
        by_target: dict[str, list[OneSidedOp]] = {}
        for op in ops:
            by_target.setdefault(op.target, []).append(op)
        for target, group in by_target.items():
            self._charge(initiator, target, [op.nbytes for op in group],
                         [(op.tclass, op.client, op.region) for op in group])
        futures = []
        for op in ops:
            fut: Future = Future()
            self._submit(initiator, op, fut)
            futures.append(fut)
        return futures

    def _submit(self, initiator: str, op: OneSidedOp, fut: Future) -> None:
        self._engine(initiator).q.put((op, fut))

    def _engine(self, initiator: str) -> _Engine:
        with self._lock:
            eng = self._engines.get(initiator)
            if eng is None:
                eng = self._engines[initiator] = _Engine(self, initiator)
            return eng

    @contextmanager
    def hold_completions(self):
        """Test hook: posted one-sided ops do not complete inside the block."""
        self._gate.clear()
        try:
            yield
        finally:
            self._gate.set()

    # -- two-sided ----------------------------------------------------------------

    def send(self, src: str, dst: str, payload, imm: int, *, tclass: str = ON_DEMAND,
             client: Optional[str] = None, region: Optional[int] = None) -> None:
        self.send_batch(src, dst, [(payload, imm)], tclass=tclass, client=client, region=region)

    def send_batch(self, src: str, dst: str, messages: Iterable, *, tclass: str = ON_DEMAND,
                   client: Optional[str] = None, region: Optional[int] = None) -> None:
        """Deliver ``messages`` (``(payload, imm)`` or ``(payload, imm, tags)``) in order.

        ``tags`` is ``(tclass, client, region)`` and overrides the keyword
        defaults for that message.
        """
        msgs = []
        for m in messages:
            payload, imm = m[0], m[1]
            tags = m[2] if len(m) > 2 else (tclass, client, region)
            payload = bytes(payload)
            if len(payload) > self.max_message:
                raise MessageTooLarge(f"{len(payload)} bytes > max message {self.max_message}")
            msgs.append((payload, imm, tags))
        if not msgs:
            raise ValueError("empty batch")
        self._node(dst)
        self.endpoint(src)
        elapsed = self._charge(src, dst, [len(p) for p, _, _ in msgs], [t for _, _, t in msgs])
        if self.pace:
            time.sleep(elapsed)
        self._deliver(src, dst, [(p, imm & 0xFFFFFFFF) for p, imm, _ in msgs])

    def _deliver(self, src: str, dst: str, msgs: list[tuple[bytes, int]]) -> None:
        target = self.endpoint(dst)
        for payload, imm in msgs:
            target.receive_queue.put(Message(payload, imm, src))

    def close(self) -> None:
        with self._lock:
            engines = list(self._engines.values())
            self._engines.clear()
        self._gate.set()
        for eng in engines:
            eng.q.put(None)
