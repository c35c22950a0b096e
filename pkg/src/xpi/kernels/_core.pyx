# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for mod-2^64 linear algebra.

C unsigned arithmetic wraps on overflow, which is exactly ring
arithmetic over Z_{2^64}.
"""

import numpy as np

ctypedef unsigned long long u64


def matmul_u64(const u64[:, ::1] a, const u64[:, ::1] b):
    """(m, k) @ (k, n) over Z_{2^64}."""
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    if b.shape[0] != k:
        raise ValueError("inner dimensions differ")
    out_arr = np.zeros((m, n), dtype=np.uint64)
    cdef u64[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef u64 aip
    with nogil:
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                if aip == 0:
                    continue
                for j in range(n):
                    out[i, j] = out[i, j] + aip * b[p, j]
    return out_arr


def dconv3x3_u64(const u64[:, :, ::1] x, const u64[:, :, ::1] k):
    """Per-slice 3x3 convolution over Z_{2^64}, zero padded.

    x has shape (m, h, w) and k has shape (m, 3, 3); slice i of the
    output is x[i] convolved with k[i].
    """
    cdef Py_ssize_t m = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t w = x.shape[2]
    if k.shape[0] != m or k.shape[1] != 3 or k.shape[2] != 3:
        raise ValueError("kernel must have shape (m, 3, 3)")
    out_arr = np.zeros((m, h, w), dtype=np.uint64)
    cdef u64[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, di, dj, yi, xj
    cdef u64 acc
    with nogil:
        for c in range(m):
            for i in range(h):
                for j in range(w):
                    acc = 0
                    for di in range(3):
                        yi = i + di - 1
                        if yi < 0 or yi >= h:
                            continue
                        for dj in range(3):
                            xj = j + dj - 1
                            if xj < 0 or xj >= w:
                                continue
                            acc = acc + x[c, yi, xj] * k[c, di, dj]
                    out[c, i, j] = acc
    return out_arr
