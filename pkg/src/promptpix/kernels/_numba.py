"""Numba JIT kernels. Serial loops with a fixed accumulation order so that
results are bit-identical run to run (and identical to the numpy backend).
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, kh, kw, sh, sw, out):
    n, h, w, c = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                p = 0
                for di in range(kh):
                    for dj in range(kw):
                        for ch in range(c):
                            out[b, i, j, p] = x[b, i * sh + di, j * sw + dj, ch]
                            p += 1
    return out


@njit(cache=True)
def col2im(cols, kh, kw, sh, sw, out):
    n, h, w, c = out.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out[...] = 0.0
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                p = 0
                for di in range(kh):
                    for dj in range(kw):
                        for ch in range(c):
                            out[b, i * sh + di, j * sw + dj, ch] += cols[b, i, j, p]
                            p += 1
    return out


@njit(cache=True)
def scatter_add_rows(out, idx, rows):
    m, d = rows.shape
    for i in range(m):
        r = idx[i]
        for j in range(d):
            out[r, j] += rows[i, j]
    return out
