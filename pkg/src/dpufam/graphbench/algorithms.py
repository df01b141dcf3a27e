"""Frontier-based graph algorithms over :class:`~.csr.CsrGraph`.

Vertices are processed in fixed-size blocks by a worker pool. Each block
reads its offsets and the edge ranges it needs through the graph's array
views, runs a kernel, and returns candidate updates. Candidates are merged
in block order, so results do not depend on the thread count, the kernel
backend or whether the graph lives in FAM.

Only the graph arrays are read through the views; per-run state (levels,
ranks, labels) is ordinary numpy memory.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy as np

from . import kernels as _kernels
from .csr import CsrGraph

DEFAULT_BLOCK = 1024
SPARSE_DIV = 8  # a block is read sparsely when under 1/SPARSE_DIV of it is active
RADII_SAMPLES = 64
UNREACHED = -1


def default_threads() -> int:
    return os.cpu_count() or 1


class _Runner:
    def __init__(self, g: CsrGraph, threads: Optional[int], block: int, backend: Optional[str]):
        if block < 1:
            raise ValueError("block must be positive")
        self.g = g
        self.block = block
        self.k = _kernels.get(backend)
        self.threads = threads or default_threads()
        self.nblocks = -(-g.n // block)
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def active_blocks(self, mask: Optional[np.ndarray]) -> list[int]:
        if mask is None:
            return list(range(self.nblocks))
        hit = np.flatnonzero(mask)
        return np.unique(hit // self.block).tolist()

    def map(self, fn: Callable, blocks: list[int]) -> list:
        if self.pool is None or len(blocks) < 2:
            return [fn(b) for b in blocks]
        return list(self.pool.map(fn, blocks))

    def gather(self, b: int, offsets, edges, mask: Optional[np.ndarray]):
        """Vertices, local offsets and edge targets of block ``b``."""
        lo = b * self.block
        hi = min(self.g.n, lo + self.block)
        off = offsets.read(lo, hi + 1)
        act = None
        if mask is not None:
            act = np.flatnonzero(mask[lo:hi])
            if act.size * SPARSE_DIV >= hi - lo:
                act = None
        if act is None:
            vertices = np.arange(lo, hi, dtype=np.int64)
            return vertices, off - off[0], edges.read(int(off[0]), int(off[-1]))
        starts, ends = off[act], off[act + 1]
        loff = np.zeros(act.size + 1, dtype=np.int64)
        np.cumsum(ends - starts, out=loff[1:])
        pieces = []
        i = 0
        # coalesce contiguous edge ranges into single reads
        while i < act.size:
            j = i
            while j + 1 < act.size and ends[j] == starts[j + 1]:
                j += 1
            if ends[j] > starts[i]:
                pieces.append(edges.read(int(starts[i]), int(ends[j])))
            i = j + 1
        e = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64)
        return act + lo, loff, e

    def directions(self, undirected: bool):
        g = self.g
        out = [(g.vertex_offsets, g.edges)]
        if undirected:
            if not g.has_reverse:
                raise ValueError("undirected traversal needs reverse edge arrays")
            out.append((g.rev_offsets, g.rev_edges))
        return out

    def expand(self, kernel: Callable, mask: np.ndarray, *state, undirected: bool = False):
        """Run a push kernel over the frontier and concatenate its candidates."""
        u8 = mask.view(np.uint8)
        dirs = self.directions(undirected)

        def work(b):
            res = []
            for offs, edges in dirs:
                v, loff, e = self.gather(b, offs, edges, mask)
                res.append(kernel(v, loff, e, *state, u8))
            return res

        parts = [r for blk in self.map(work, self.active_blocks(mask)) for r in blk]
        if not parts:
            return np.empty(0, dtype=np.int64), None
        return (np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]))


def bfs(g: CsrGraph, source: int, *, threads: Optional[int] = None,
        block: int = DEFAULT_BLOCK, backend: Optional[str] = None):
    """Parent and level arrays of a BFS tree; unreachable vertices get -1.

    Among several candidate parents the first in block scan order wins.
    """
    if not 0 <= source < g.n:
        raise ValueError("source out of range")
    parent = np.full(g.n, UNREACHED, dtype=np.int64)
    level = np.full(g.n, UNREACHED, dtype=np.int64)
    parent[source] = source
    level[source] = 0
    frontier = np.zeros(g.n, dtype=bool)
    frontier[source] = True
    depth = 0
    with _Runner(g, threads, block, backend) as r:
        while frontier.any():
            dst, src = r.expand(r.k.bfs_expand, frontier, parent)
            frontier = np.zeros(g.n, dtype=bool)
            if dst.size == 0:
                break
            uniq, first = np.unique(dst, return_index=True)
            depth += 1
            parent[uniq] = src[first]
            level[uniq] = depth
            frontier[uniq] = True
    return parent, level


def out_degrees(g: CsrGraph, r: _Runner) -> np.ndarray:
    def work(b):
        lo = b * r.block
        hi = min(g.n, lo + r.block)
        return np.diff(g.vertex_offsets.read(lo, hi + 1))
    parts = r.map(work, list(range(r.nblocks)))
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def pagerank(g: CsrGraph, damping: float = 0.85, iters: int = 10, *,
             threads: Optional[int] = None, block: int = DEFAULT_BLOCK,
             backend: Optional[str] = None) -> np.ndarray:
    """Pull-style PageRank; rank of dangling vertices is spread uniformly."""
    if not g.has_reverse:
        raise ValueError("pagerank needs reverse edge arrays")
    n = g.n
    if n == 0:
        return np.empty(0, dtype=np.float64)
    rank = np.full(n, 1.0 / n)
    with _Runner(g, threads, block, backend) as r:
        deg = out_degrees(g, r)
        dangling = deg == 0
        safe = np.where(dangling, 1, deg)
        blocks = list(range(r.nblocks))
        for _ in range(iters):
            contrib = np.where(dangling, 0.0, rank / safe)
            lost = rank[dangling].sum()

            def work(b):
                _, loff, e = r.gather(b, g.rev_offsets, g.rev_edges, None)
                return r.k.pr_pull(loff, e, contrib)

            pulled = np.concatenate(r.map(work, blocks))
            rank = (1.0 - damping) / n + damping * (pulled + lost / n)
    return rank


def connected_components(g: CsrGraph, *, threads: Optional[int] = None,
                         block: int = DEFAULT_BLOCK, backend: Optional[str] = None) -> np.ndarray:
    """Weakly connected components; each vertex gets the smallest id in its component."""
    labels = np.arange(g.n, dtype=np.int64)
    frontier = np.ones(g.n, dtype=bool)
    with _Runner(g, threads, block, backend) as r:
        while frontier.any():
            dst, lab = r.expand(r.k.cc_relax, frontier, labels, undirected=True)
            if dst.size == 0:
                break
            nxt = labels.copy()
            np.minimum.at(nxt, dst, lab)
            frontier = nxt < labels
            labels = nxt
    return labels


def radii(g: CsrGraph, samples: int = RADII_SAMPLES, seed: int = 0, *,
          threads: Optional[int] = None, block: int = DEFAULT_BLOCK,
          backend: Optional[str] = None) -> np.ndarray:
    """Eccentricity estimates from a multi-source BFS over the undirected view.

    Each vertex gets its largest distance to any sampled source it can
    reach, which never exceeds its true eccentricity. Vertices reached by no
    sample get -1.
    """
    if not 1 <= samples <= 64:
        raise ValueError("samples must be in [1, 64]")
    n = g.n
    est = np.full(n, UNREACHED, dtype=np.int64)
    if n == 0:
        return est
    k = min(samples, n)
    sources = np.random.default_rng(seed).choice(n, size=k, replace=False)
    visited = np.zeros(n, dtype=np.uint64)
    visited[sources] = np.left_shift(np.uint64(1), np.arange(k, dtype=np.uint64))
    est[sources] = 0
    frontier = visited != 0
    rounds = 0
    with _Runner(g, threads, block, backend) as r:
        while frontier.any():
            dst, bits = r.expand(r.k.radii_or, frontier, visited, undirected=True)
            if dst.size == 0:
                break
            nxt = visited.copy()
            np.bitwise_or.at(nxt, dst, bits)
            frontier = nxt != visited
            rounds += 1
            est[frontier] = rounds
            visited = nxt
    return est


def betweenness(g: CsrGraph, source: int, *, threads: Optional[int] = None,
                block: int = DEFAULT_BLOCK, backend: Optional[str] = None) -> np.ndarray:
    """Single-source Brandes dependencies; the source's entry is its total dependency."""
    if not 0 <= source < g.n:
        raise ValueError("source out of range")
    n = g.n
    level = np.full(n, UNREACHED, dtype=np.int64)
    sigma = np.zeros(n, dtype=np.float64)
    level[source] = 0
    sigma[source] = 1.0
    frontier = np.zeros(n, dtype=bool)
    frontier[source] = True
    depth = 0
    delta = np.zeros(n, dtype=np.float64)
    with _Runner(g, threads, block, backend) as r:
        while True:
            dst, add = r.expand(r.k.bc_forward, frontier, level, sigma)
            if dst.size == 0:
                break
            sigma = sigma + np.bincount(dst, weights=add, minlength=n)
            frontier = np.zeros(n, dtype=bool)
            frontier[dst] = True
            depth += 1
            level[frontier] = depth
        for d in range(depth - 1, -1, -1):
            mask = level == d

            def work(b):
                v, loff, e = r.gather(b, g.vertex_offsets, g.edges, mask)
                return v, r.k.bc_backward(v, loff, e, level, sigma, delta, d)

            for v, s in r.map(work, r.active_blocks(mask)):
                on = mask[v]
                delta[v[on]] = s[on]
    return delta


ALGORITHMS = {
    "bfs": bfs,
    "pagerank": pagerank,
    "cc": connected_components,
    "radii": radii,
    "bc": betweenness,
}


def run(name: str, g: CsrGraph, *, source: int = 0, **kw):
    """Run one algorithm by name; ``bfs`` returns ``(parent, level)``, the rest one array."""
    if name not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}")
    if name in ("bfs", "bc"):
        return ALGORITHMS[name](g, source, **kw)
    return ALGORITHMS[name](g, **kw)
