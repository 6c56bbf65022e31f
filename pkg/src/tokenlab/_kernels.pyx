# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

ctypedef fused floating:
    float
    double

cdef uint64_t FNV_OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001b3ULL


def fnv1a64(const unsigned char[::1] data, uint64_t state=FNV_OFFSET):
    cdef Py_ssize_t i, n = data.shape[0]
    cdef uint64_t h = state
    with nogil:
        for i in range(n):
            h ^= data[i]
            h *= FNV_PRIME
    return h


def scatter_add_rows(floating[:, ::1] target, const int64_t[::1] index,
                     const floating[:, ::1] rows):
    cdef Py_ssize_t i, j, r
    cdef Py_ssize_t n = index.shape[0], d = rows.shape[1]
    cdef Py_ssize_t nrows = target.shape[0]
    if rows.shape[0] != n or target.shape[1] != d:
        raise ValueError("shape mismatch in scatter_add_rows")
    for i in range(n):
        if index[i] < 0 or index[i] >= nrows:
            raise IndexError(f"row index {index[i]} out of range")
    with nogil:
        for i in range(n):
            r = index[i]
            for j in range(d):
                target[r, j] += rows[i, j]


def signed_rank_counts(const int64_t[::1] doubled_ranks):
    cdef Py_ssize_t n = doubled_ranks.shape[0]
    cdef int64_t total = 0, reach = 0, r, w
    cdef Py_ssize_t i
    for i in range(n):
        if doubled_ranks[i] <= 0:
            raise ValueError("ranks must be positive")
        total += doubled_ranks[i]
    out = np.zeros(total + 1, dtype=np.int64)
    cdef int64_t[::1] c = out
    c[0] = 1
    with nogil:
        for i in range(n):
            r = doubled_ranks[i]
            w = reach
            while w >= 0:
                if c[w]:
                    c[w + r] += c[w]
                w -= 1
            reach += r
    return out
