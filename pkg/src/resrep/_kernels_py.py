"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :ho, :wo]
    # (N, C, Ho, Wo, kh, kw) -> (N, C, kh, kw, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, c, h, w, kh, kw, stride, pad):
    n = cols.shape[0]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if cols.shape[1:] != (c * kh * kw, ho * wo):
        raise ValueError(
            f"columns {cols.shape} do not match image (C={c}, H={h}, W={w}) with kernel {kh}x{kw}"
        )
    taps = cols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += taps[:, :, i, j]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w])
    return dxp
