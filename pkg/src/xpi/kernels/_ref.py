"""Pure-numpy fallback kernels for mod-2^64 linear algebra.

numpy integer arithmetic wraps on overflow, which is exactly ring
arithmetic over Z_{2^64}, so these are plain matmul/einsum calls.
"""

import numpy as np


def matmul_u64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(m, k) @ (k, n) over Z_{2^64}."""
    return a @ b


def dconv3x3_u64(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Per-slice 3x3 convolution over Z_{2^64}, zero padded.

    x has shape (m, h, w) and k has shape (m, 3, 3); slice i of the
    output is x[i] convolved with k[i].
    """
    m, h, w = x.shape
    padded = np.zeros((m, h + 2, w + 2), dtype=np.uint64)
    padded[:, 1:-1, 1:-1] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return np.einsum("mijkl,mkl->mij", windows, k, dtype=np.uint64)
