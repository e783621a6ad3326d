"""Shared internal helpers: packed symmetric indexing, worker counts, RNG streams."""

import os

import numpy as np


def packed_size(k):
    return k * (k + 1) // 2


def packed_index_pairs(k):
    """Ordered (i, j) pairs with i <= j for the packed upper triangle."""
    return [(i, j) for i in range(k) for j in range(i, k)]


def packed_index(i, j, k):
    """Position of (min(i,j), max(i,j)) in the packed upper triangle of a k x k matrix."""
    i, j = (i, j) if i <= j else (j, i)
    return i * k - i * (i - 1) // 2 + (j - i)


def unpack_symmetric(packed, k):
    """Expand packed upper-triangle rows (…, k(k+1)/2) into symmetric (…, k, k) arrays."""
    packed = np.asarray(packed, dtype=float)
    out = np.zeros(packed.shape[:-1] + (k, k))
    pos = 0
    for i in range(k):
        for j in range(i, k):
            out[..., i, j] = packed[..., pos]
            out[..., j, i] = packed[..., pos]
            pos += 1
    return out


def pack_symmetric(mat):
    """Pack the upper triangle (i <= j) of a symmetric matrix into a flat vector."""
    mat = np.asarray(mat, dtype=float)
    k = mat.shape[-1]
    idx = np.triu_indices(k)
    return mat[..., idx[0], idx[1]]


def symmetrize(mat):
    return (mat + mat.T) / 2.0


def worker_count():
    """Worker cap for parallel sections: min(CFMV_THREADS, cpu count), at least 1."""
    cap = os.environ.get("CFMV_THREADS")
    cpus = os.cpu_count() or 1
    if cap is None:
        return cpus
    try:
        return max(1, min(int(cap), cpus))
    except ValueError:
        return cpus


def spawn_rngs(seed, n):
    """Independent per-task generators; results do not depend on scheduling order."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
