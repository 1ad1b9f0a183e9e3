# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im.

Column layout is (N, C*kh*kw, Ho*Wo), row index ``(c*kh + i)*kw + j``.
``col2im`` accumulates taps in ascending (i, j) order per input pixel, the
same order the numpy fallback uses, so both backends agree bit for bit.
"""
import numpy as np

cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) noexcept nogil:
    # smallest o >= 0 with o*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t size, Py_ssize_t nout) noexcept nogil:
    # one past the largest o < nout with o*stride + off < size
    cdef Py_ssize_t top
    if size - off <= 0:
        return 0
    top = (size - 1 - off) // stride + 1
    return top if top < nout else nout


cdef void _im2col(const floating* x, floating* cols, Py_ssize_t n, Py_ssize_t c,
                  Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t b, ch, i, j, oy, ox, y0, y1, x0, x1, iy
    cdef const floating* src
    cdef floating* dst
    for b in range(n):
        for ch in range(c):
            src = x + (b * c + ch) * h * w
            for i in range(kh):
                y0 = _lo(i - pad, stride)
                y1 = _hi(i - pad, stride, h, ho)
                for j in range(kw):
                    x0 = _lo(j - pad, stride)
                    x1 = _hi(j - pad, stride, w, wo)
                    dst = cols + ((b * c + ch) * kh * kw + i * kw + j) * ho * wo
                    for oy in range(y0, y1):
                        iy = oy * stride + i - pad
                        for ox in range(x0, x1):
                            dst[oy * wo + ox] = src[iy * w + ox * stride + j - pad]


cdef void _col2im(const floating* cols, floating* dx, Py_ssize_t n, Py_ssize_t c,
                  Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t b, ch, i, j, oy, ox, y0, y1, x0, x1, iy
    cdef const floating* src
    cdef floating* dst
    for b in range(n):
        for ch in range(c):
            dst = dx + (b * c + ch) * h * w
            for i in range(kh):
                y0 = _lo(i - pad, stride)
                y1 = _hi(i - pad, stride, h, ho)
                for j in range(kw):
                    x0 = _lo(j - pad, stride)
                    x1 = _hi(j - pad, stride, w, wo)
                    src = cols + ((b * c + ch) * kh * kw + i * kw + j) * ho * wo
                    for oy in range(y0, y1):
                        iy = oy * stride + i - pad
                        for ox in range(x0, x1):
                            dst[iy * w + ox * stride + j - pad] += src[oy * wo + ox]


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    if n == 0 or c == 0:
        return out
    with nogil:
        _im2col(&x[0, 0, 0, 0], &cols[0, 0, 0], n, c, h, w, kh, kw, stride, pad, ho, wo)
    return out


def col2im(floating[:, :, ::1] cols, int c, int h, int w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    if cols.shape[1] != c * kh * kw or cols.shape[2] != ho * wo:
        raise ValueError(
            f"columns {tuple(cols.shape)[:3]} do not match image (C={c}, H={h}, W={w}) "
            f"with kernel {kh}x{kw}"
        )
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    if n == 0 or c == 0:
        return out
    with nogil:
        _col2im(&cols[0, 0, 0], &dx[0, 0, 0, 0], n, c, h, w, kh, kw, stride, pad, ho, wo)
    return out
