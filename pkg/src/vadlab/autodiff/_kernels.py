"""Compiled im2col / col2im for channels-last convolution.

Column layout is ``(N, Ho, Wo, K, K, C)`` so that reshaping to
``(N*Ho*Wo, K*K*C)`` gives a row-major patch matrix.  Zero padding is
handled by bounds checks, never by materialising a padded copy.
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def im2col_nhwc(x, k, stride, pad, ho, wo, out):
    n_img, h, w, c = x.shape
    for n in range(n_img):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(k):
                    iy = oy * stride + i - pad
                    for j in range(k):
                        ix = ox * stride + j - pad
                        if iy < 0 or iy >= h or ix < 0 or ix >= w:
                            for ch in range(c):
                                out[n, oy, ox, i, j, ch] = 0.0
                        else:
                            for ch in range(c):
                                out[n, oy, ox, i, j, ch] = x[n, iy, ix, ch]


@numba.njit(cache=True, nogil=True)
def col2im_nhwc(cols, k, stride, pad, out):
    # Fixed loop order: accumulation into each input pixel is deterministic.
    n_img, ho, wo = cols.shape[0], cols.shape[1], cols.shape[2]
    h, w, c = out.shape[1], out.shape[2], out.shape[3]
    for n in range(n_img):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(k):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for j in range(k):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= w:
                            continue
                        for ch in range(c):
                            out[n, iy, ix, ch] += cols[n, oy, ox, i, j, ch]


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    im2col_nhwc(x, k, stride, pad, ho, wo, out)
    return out


def col2im(cols: np.ndarray, input_shape, k: int, stride: int, pad: int) -> np.ndarray:
    out = np.zeros(input_shape, dtype=cols.dtype)
    col2im_nhwc(cols, k, stride, pad, out)
    return out
