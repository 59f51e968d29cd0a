"""Pure-numpy reference implementations of the hot kernels.

Layout convention is NHWC; the patch axis of the column matrix is ordered
(kh, kw, c), matching the numba backend exactly. All loops here run over
the kernel taps (at most kh*kw iterations), so the fallback stays
vectorized over the batch and spatial axes.
"""

import numpy as np


def im2col(x, kh, kw, sh, sw, out):
    """Gather sliding (kh, kw) patches of x (N,H,W,C) into out (N,OH,OW,kh*kw*C)."""
    n, h, w, c = x.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    for i in range(kh):
        for j in range(kw):
            tap = x[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :]
            out[:, :, :, (i * kw + j) * c : (i * kw + j + 1) * c] = tap
    return out


def col2im(cols, kh, kw, sh, sw, out):
    """Adjoint of im2col: scatter-add column gradients back onto out (N,H,W,C)."""
    n, h, w, c = out.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out[...] = 0.0
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * oh : sh, j : j + sw * ow : sw, :] += cols[
                :, :, :, (i * kw + j) * c : (i * kw + j + 1) * c
            ]
    return out


def scatter_add_rows(out, idx, rows):
    """out[idx[i]] += rows[i] with repeated indices accumulated."""
    np.add.at(out, idx, rows)
    return out
