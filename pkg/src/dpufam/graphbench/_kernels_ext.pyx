# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled traversal kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t, uint8_t

cnp.import_array()


def bfs_expand(const int64_t[::1] vertices, const int64_t[::1] loff, const int64_t[::1] edges,
               const int64_t[::1] parent, const uint8_t[::1] frontier):
    cdef Py_ssize_t i, e, k = 0, nv = vertices.shape[0]
    cdef int64_t v, w
    out_dst = np.empty(edges.shape[0], dtype=np.int64)
    out_src = np.empty(edges.shape[0], dtype=np.int64)
    cdef int64_t[::1] od = out_dst
    cdef int64_t[::1] os = out_src
    for i in range(nv):
        v = vertices[i]
        if not frontier[v]:
            continue
        for e in range(loff[i], loff[i + 1]):
            w = edges[e]
            if parent[w] == -1:
                od[k] = w
                os[k] = v
                k += 1
    return out_dst[:k], out_src[:k]


def pr_pull(const int64_t[::1] loff, const int64_t[::1] edges, const double[::1] contrib):
    cdef Py_ssize_t i, e, n = loff.shape[0] - 1
    cdef double s
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        s = 0.0
        for e in range(loff[i], loff[i + 1]):
            s += contrib[edges[e]]
        o[i] = s
    return out


def cc_relax(const int64_t[::1] vertices, const int64_t[::1] loff, const int64_t[::1] edges,
             const int64_t[::1] labels, const uint8_t[::1] frontier):
    cdef Py_ssize_t i, e, k = 0, nv = vertices.shape[0]
    cdef int64_t v, w, lab
    out_dst = np.empty(edges.shape[0], dtype=np.int64)
    out_lab = np.empty(edges.shape[0], dtype=np.int64)
    cdef int64_t[::1] od = out_dst
    cdef int64_t[::1] ol = out_lab
    for i in range(nv):
        v = vertices[i]
        if not frontier[v]:
            continue
        lab = labels[v]
        for e in range(loff[i], loff[i + 1]):
            w = edges[e]
            if lab < labels[w]:
                od[k] = w
                ol[k] = lab
                k += 1
    return out_dst[:k], out_lab[:k]


def radii_or(const int64_t[::1] vertices, const int64_t[::1] loff, const int64_t[::1] edges,
             const uint64_t[::1] visited, const uint8_t[::1] frontier):
    cdef Py_ssize_t i, e, k = 0, nv = vertices.shape[0]
    cdef int64_t v, w
    cdef uint64_t bits
    out_dst = np.empty(edges.shape[0], dtype=np.int64)
    out_bits = np.empty(edges.shape[0], dtype=np.uint64)
    cdef int64_t[::1] od = out_dst
    cdef uint64_t[::1] ob = out_bits
    for i in range(nv):
        v = vertices[i]
        if not frontier[v]:
            continue
        bits = visited[v]
        for e in range(loff[i], loff[i + 1]):
            w = edges[e]
            if bits & ~visited[w]:
                od[k] = w
                ob[k] = bits
                k += 1
    return out_dst[:k], out_bits[:k]


def bc_forward(const int64_t[::1] vertices, const int64_t[::1] loff, const int64_t[::1] edges,
               const int64_t[::1] level, const double[::1] sigma, const uint8_t[::1] frontier):
    cdef Py_ssize_t i, e, k = 0, nv = vertices.shape[0]
    cdef int64_t v, w
    out_dst = np.empty(edges.shape[0], dtype=np.int64)
    out_add = np.empty(edges.shape[0], dtype=np.float64)
    cdef int64_t[::1] od = out_dst
    cdef double[::1] oa = out_add
    for i in range(nv):
        v = vertices[i]
        if not frontier[v]:
            continue
        for e in range(loff[i], loff[i + 1]):
            w = edges[e]
            if level[w] == -1:
                od[k] = w
                oa[k] = sigma[v]
                k += 1
    return out_dst[:k], out_add[:k]


def bc_backward(const int64_t[::1] vertices, const int64_t[::1] loff, const int64_t[::1] edges,
                const int64_t[::1] level, const double[::1] sigma, const double[::1] delta,
                int64_t depth):
    cdef Py_ssize_t i, e, nv = vertices.shape[0]
    cdef int64_t v, w
    cdef double s
    out = np.zeros(nv, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(nv):
        v = vertices[i]
        if level[v] != depth:
            continue
        s = 0.0
        for e in range(loff[i], loff[i + 1]):
            w = edges[e]
            if level[w] == depth + 1:
                s += (sigma[v] / sigma[w]) * (1.0 + delta[w])
        o[i] = s
    return out
