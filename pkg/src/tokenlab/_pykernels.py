"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, state=FNV_OFFSET):
    h = state
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h


def scatter_add_rows(target, index, rows):
    index = np.asarray(index, dtype=np.int64)
    if rows.shape[0] != index.shape[0] or target.shape[1] != rows.shape[1]:
        raise ValueError("shape mismatch in scatter_add_rows")
    if index.size == 0:
        return
    if index.min() < 0 or index.max() >= target.shape[0]:
        raise IndexError("row index out of range")
    order = np.argsort(index, kind="stable")
    sorted_idx = index[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    sums = np.add.reduceat(rows[order], starts, axis=0)
    target[sorted_idx[starts]] += sums


def signed_rank_counts(doubled_ranks):
    ranks = np.asarray(doubled_ranks, dtype=np.int64)
    if np.any(ranks <= 0):
        raise ValueError("ranks must be positive")
    counts = np.zeros(int(ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    reach = 0
    for r in ranks:
        r = int(r)
        counts[r:reach + r + 1] += counts[:reach + 1].copy()
        reach += r
    return counts
