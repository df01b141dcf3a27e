"""Numpy implementations of the traversal kernels (fallback backend).

Every kernel scans the frontier vertices of one block in vertex order and
their edges in CSR order, emitting candidate updates in that scan order.
Results must match the compiled backend bit for bit.
"""
import numpy as np


def _expand(vertices, loff, frontier):
    """Source vertex and edge positions for the frontier part of a block."""
    deg = np.diff(loff)
    active = frontier[vertices].astype(bool) & (deg > 0)
    if not active.any():
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    src = np.repeat(vertices[active], deg[active])
    starts = np.repeat(loff[:-1][active], deg[active])
    within = np.arange(src.size, dtype=np.int64) - np.repeat(
        np.cumsum(deg[active]) - deg[active], deg[active])
    return src, starts + within


def bfs_expand(vertices, loff, edges, parent, frontier):
    src, pos = _expand(vertices, loff, frontier)
    dst = edges[pos]
    keep = parent[dst] == -1
    return dst[keep], src[keep]


def pr_pull(loff, edges, contrib):
    n = loff.size - 1
    if edges.size == 0:
        return np.zeros(n, dtype=np.float64)
    owner = np.repeat(np.arange(n, dtype=np.int64), np.diff(loff))
    return np.bincount(owner, weights=contrib[edges], minlength=n)


def cc_relax(vertices, loff, edges, labels, frontier):
    src, pos = _expand(vertices, loff, frontier)
    dst = edges[pos]
    lab = labels[src]
    keep = lab < labels[dst]
    return dst[keep], lab[keep]


def radii_or(vertices, loff, edges, visited, frontier):
    src, pos = _expand(vertices, loff, frontier)
    dst = edges[pos]
    bits = visited[src]
    keep = (bits & ~visited[dst]) != 0
    return dst[keep], bits[keep]


def bc_forward(vertices, loff, edges, level, sigma, frontier):
    src, pos = _expand(vertices, loff, frontier)
    dst = edges[pos]
    keep = level[dst] == -1
    return dst[keep], sigma[src[keep]]


def bc_backward(vertices, loff, edges, level, sigma, delta, depth):
    n = vertices.size
    deg = np.diff(loff)
    owner = np.repeat(np.arange(n, dtype=np.int64), deg)
    on_level = level[vertices] == depth
    dst = edges[:loff[-1]]
    keep = on_level[owner] & (level[dst] == depth + 1)
    o = owner[keep]
    w = dst[keep]
    terms = (sigma[vertices[o]] / sigma[w]) * (1.0 + delta[w])
    return np.bincount(o, weights=terms, minlength=n)
