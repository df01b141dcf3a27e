"""CSR graphs: parsing, generators, the binary cache format and FAM placement.

A :class:`CsrGraph` holds its arrays behind small views with a single
``read(lo, hi)`` method, so the algorithms run unchanged over plain numpy
arrays or over FAM objects read through a host agent.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import FamError

MAGIC = b"DPUFCSR1"
_HEADER = struct.Struct("<8sQQ")
WRITE_PIECE = 1 << 20


class GraphFormatError(FamError):
    pass


class PlainArray:
    """In-memory int64 array view."""

    def __init__(self, data: np.ndarray):
        self.data = np.ascontiguousarray(data, dtype=np.int64)

    def __len__(self):
        return self.data.size

    def read(self, lo: int, hi: int) -> np.ndarray:
        return self.data[lo:hi]


class FamArray:
    """int64 array stored in a FAM object; every read goes through ``fam_read``."""

    def __init__(self, host, handle, count: int):
        self.host = host
        self.handle = handle
        self.count = count

    def __len__(self):
        return self.count

    def read(self, lo: int, hi: int) -> np.ndarray:
        if hi <= lo:
            return np.empty(0, dtype=np.int64)
        raw = self.host.fam_read(self.handle, lo * 8, (hi - lo) * 8)
        return np.frombuffer(raw, dtype="<i8").astype(np.int64, copy=False)


@dataclass
class CsrGraph:
    n: int
    m: int
    vertex_offsets: object
    edges: object
    rev_offsets: Optional[object] = None
    rev_edges: Optional[object] = None

    @property
    def has_reverse(self) -> bool:
        return self.rev_offsets is not None

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Full forward arrays (reads everything; meant for tests and tools)."""
        return self.vertex_offsets.read(0, self.n + 1), self.edges.read(0, self.m)


def _build(n: int, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # stable sort keeps the input order of duplicate and same-source edges
    order = np.argsort(src, kind="stable")
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
    return offsets, dst[order].astype(np.int64)


def from_edges(n: int, src, dst, *, reverse: bool = True) -> CsrGraph:
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.shape != dst.shape:
        raise GraphFormatError("src and dst differ in length")
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
        raise GraphFormatError(f"vertex id out of range [0, {n})")
    off, edges = _build(n, src, dst)
    g = CsrGraph(n, int(src.size), PlainArray(off), PlainArray(edges))
    if reverse:
        roff, redges = _build(n, dst, src)
        g.rev_offsets, g.rev_edges = PlainArray(roff), PlainArray(redges)
    return g


def edge_pairs(g: CsrGraph) -> tuple[np.ndarray, np.ndarray]:
    off, edges = g.arrays()
    return np.repeat(np.arange(g.n, dtype=np.int64), np.diff(off)), edges


def check(g: CsrGraph) -> None:
    """Raise :class:`GraphFormatError` if the CSR invariants do not hold."""
    off, edges = g.arrays()
    if off[0] != 0 or off[-1] != g.m or np.any(np.diff(off) < 0):
        raise GraphFormatError("bad vertex offsets")
    if edges.size and (edges.min() < 0 or edges.max() >= g.n):
        raise GraphFormatError("edge target out of range")


# -- edge-list text -------------------------------------------------------------------

def parse_edge_list(text: str, n: Optional[int] = None, *, reverse: bool = True) -> CsrGraph:
    """Parse ``src dst`` lines. ``#`` starts a comment.

    Without ``n`` the vertex count is one more than the largest id seen.
    """
    src, dst = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(f"line {lineno}: expected 'src dst', got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"line {lineno}: non-integer vertex id") from None
        if a < 0 or b < 0:
            raise GraphFormatError(f"line {lineno}: negative vertex id")
        if max(a, b) >= 1 << 63 or (n is not None and max(a, b) >= n):
            raise GraphFormatError(f"line {lineno}: vertex id {max(a, b)} overflows")
        src.append(a)
        dst.append(b)
    if n is None:
        n = max(max(src, default=-1), max(dst, default=-1)) + 1
    return from_edges(n, src, dst, reverse=reverse)


def load_edge_list(path: str, n: Optional[int] = None, *, reverse: bool = True) -> CsrGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_edge_list(fh.read(), n, reverse=reverse)


def format_edge_list(g: CsrGraph) -> str:
    src, dst = edge_pairs(g)
    return "".join(f"{a} {b}\n" for a, b in zip(src.tolist(), dst.tolist()))


# -- binary CSR ----------------------------------------------------------------------

def save_binary(g: CsrGraph, path: str) -> None:
    off, edges = g.arrays()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, g.n, g.m))
        fh.write(off.astype("<i8").tobytes())
        fh.write(edges.astype("<i8").tobytes())


def load_binary(path: str, *, reverse: bool = True) -> CsrGraph:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise GraphFormatError("truncated header")
        magic, n, m = _HEADER.unpack(head)
        if magic != MAGIC:
            raise GraphFormatError("bad magic")
        body = fh.read()
    if len(body) != 8 * (n + 1 + m):
        raise GraphFormatError("size does not match header")
    arr = np.frombuffer(body, dtype="<i8").astype(np.int64)
    off, edges = arr[:n + 1], arr[n + 1:]
    g = CsrGraph(n, m, PlainArray(off), PlainArray(edges))
    check(g)
    if reverse:
        src = np.repeat(np.arange(n, dtype=np.int64), np.diff(off))
        roff, redges = _build(n, edges, src)
        g.rev_offsets, g.rev_edges = PlainArray(roff), PlainArray(redges)
    return g


# -- generators -------------------------------------------------------------------------

def uniform_graph(n: int, m: int, seed: int = 0, *, reverse: bool = True) -> CsrGraph:
    rng = np.random.default_rng(seed)
    return from_edges(n, rng.integers(0, n, m), rng.integers(0, n, m), reverse=reverse)


def rmat_graph(scale: int, m: int, seed: int = 0, *, a: float = 0.57, b: float = 0.19,
               c: float = 0.19, reverse: bool = True) -> CsrGraph:
    """R-MAT edges over ``2**scale`` vertices; ids are permuted to spread hubs."""
    rng = np.random.default_rng(seed)
    n = 1 << scale
    src = np.zeros(m, dtype=np.int64)
    dst = np.zeros(m, dtype=np.int64)
    for bit in range(scale):
        r = rng.random(m)
        down = r >= a + b                        # quadrants c and d
        right = ((r >= a) & (r < a + b)) | (r >= a + b + c)
        src |= down.astype(np.int64) << bit
        dst |= right.astype(np.int64) << bit
    perm = rng.permutation(n)
    return from_edges(n, perm[src], perm[dst], reverse=reverse)


def generate(kind: str, n: int, m: int, seed: int = 0, *, reverse: bool = True) -> CsrGraph:
    if kind == "uniform":
        return uniform_graph(n, m, seed, reverse=reverse)
    if kind == "rmat":
        scale = max(1, (n - 1).bit_length())
        return rmat_graph(scale, m, seed, reverse=reverse)
    raise GraphFormatError(f"unknown generator {kind!r}")


# -- FAM placement -----------------------------------------------------------------------

@dataclass
class FamGraphLayout:
    """Region ids of a graph stored in FAM, enough for another host to map it."""
    n: int
    m: int
    offsets: int
    edges: int
    rev_offsets: Optional[int] = None
    rev_edges: Optional[int] = None

    def regions(self) -> dict[str, Optional[int]]:
        return {"offsets": self.offsets, "edges": self.edges,
                "rev_offsets": self.rev_offsets, "rev_edges": self.rev_edges}


def _store(host, arr: np.ndarray):
    raw = arr.astype("<i8").tobytes()
    h = host.fam_alloc(max(8, len(raw)))
    for pos in range(0, len(raw), WRITE_PIECE):
        host.fam_write(h, pos, raw[pos:pos + WRITE_PIECE])
    return h


def to_fam(g: CsrGraph, host, *, reverse: Optional[bool] = None) -> tuple[CsrGraph, FamGraphLayout]:
    """Copy ``g`` into FAM objects owned by ``host`` and return the FAM-backed graph.

    Vertex and edge arrays land in separate objects. The host buffer is
    flushed and emptied so traversal starts cold.
    """
    reverse = g.has_reverse if reverse is None else reverse
    off, edges = g.arrays()
    ho, he = _store(host, off), _store(host, edges)
    fg = CsrGraph(g.n, g.m, FamArray(host, ho, g.n + 1), FamArray(host, he, g.m))
    layout = FamGraphLayout(g.n, g.m, ho.region_id, he.region_id)
    if reverse:
        roff = g.rev_offsets.read(0, g.n + 1)
        redges = g.rev_edges.read(0, g.m)
        hro, hre = _store(host, roff), _store(host, redges)
        fg.rev_offsets, fg.rev_edges = FamArray(host, hro, g.n + 1), FamArray(host, hre, g.m)
        layout.rev_offsets, layout.rev_edges = hro.region_id, hre.region_id
    host.flush()
    if host.resident():
        host.evict(host.resident())
    host.wait_writebacks()
    return fg, layout


def map_fam(layout: FamGraphLayout, host) -> CsrGraph:
    """Read-only view of a FAM graph from another host."""
    def arr(rid, count):
        return FamArray(host, host.fam_map(rid, writable=False), count)
    g = CsrGraph(layout.n, layout.m, arr(layout.offsets, layout.n + 1),
                 arr(layout.edges, layout.m))
    if layout.rev_offsets is not None:
        g.rev_offsets = arr(layout.rev_offsets, layout.n + 1)
        g.rev_edges = arr(layout.rev_edges, layout.m)
    return g


def vertex_handles(g: CsrGraph) -> list:
    """FAM handles of the vertex (offset) objects, for static caching."""
    out = []
    for a in (g.vertex_offsets, g.rev_offsets):
        if isinstance(a, FamArray):
            out.append(a.handle)
    return out


def edge_handles(g: CsrGraph) -> list:
    return [a.handle for a in (g.edges, g.rev_edges) if isinstance(a, FamArray)]
