"""Convolution primitive and small tensor helpers.

Tensors are plain numpy arrays in (N, C, H, W) layout; kernels are
(D, C, K, K).  ``conv2d`` lowers to im2col + a batched matmul.  The im2col /
col2im pair comes from the compiled ``_kernels`` extension when it is
importable, otherwise from the numpy fallback.  Set ``RESREP_BACKEND`` to
``python`` or ``compiled`` to force a choice.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from . import _kernels_py


def _select_backend(choice: str | None = None):
    choice = (choice or os.environ.get("RESREP_BACKEND", "auto")).lower()
    if choice not in ("auto", "python", "compiled"):
        raise ValueError(f"unknown RESREP_BACKEND {choice!r}")
    if choice == "python":
        return "python", _kernels_py
    try:
        from . import _kernels
    except ImportError:
        if choice == "compiled":
            raise
        warnings.warn("resrep._kernels not built; using the numpy fallback", RuntimeWarning, stacklevel=2)
        return "python", _kernels_py
    return "compiled", _kernels


BACKEND, _impl = _select_backend()


def use_backend(choice: str) -> str:
    """Switch the im2col/col2im implementation at runtime; returns the active name."""
    global BACKEND, _impl
    BACKEND, _impl = _select_backend(choice)
    return BACKEND


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv_args(x, kernel, bias, stride, padding):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel {kernel.shape} does not match input {x.shape} in channels")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding ({stride}, {padding})")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match kernel {kernel.shape}")
    if out_size(x.shape[2], kernel.shape[2], stride, padding) < 1 or out_size(
        x.shape[3], kernel.shape[3], stride, padding
    ) < 1:
        raise ShapeError(f"kernel {kernel.shape} larger than padded input {x.shape}")


def _is_pointwise(kernel, stride, padding):
    return kernel.shape[2] == kernel.shape[3] == 1 and stride == 1 and padding == 0


def conv2d(x, kernel, bias=None, stride=1, padding=0, *, return_cols=False):
    """Zero-padded 2-D cross-correlation ``x * kernel + bias``.

    With ``return_cols`` the lowered input is returned as well so a backward
    pass can reuse it.
    """
    _check_conv_args(x, kernel, bias, stride, padding)
    n, c, h, w = x.shape
    d, _, kh, kw = kernel.shape
    ho, wo = out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)
    x = np.ascontiguousarray(x, dtype=kernel.dtype)
    if _is_pointwise(kernel, stride, padding):
        cols = x.reshape(n, c, h * w)
    else:
        cols = _impl.im2col(x, kh, kw, stride, padding)
    out = np.matmul(kernel.reshape(d, -1), cols).reshape(n, d, ho, wo)
    if bias is not None:
        out += bias.reshape(1, d, 1, 1)
    return (out, cols) if return_cols else out


def conv2d_backward(dout, x_shape, kernel, cols, stride=1, padding=0, need_input_grad=True):
    """Gradients of ``conv2d`` w.r.t. input, kernel and bias."""
    n, c, h, w = x_shape
    d, _, kh, kw = kernel.shape
    g = dout.reshape(n, d, -1)
    dkernel = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
    dbias = g.sum(axis=(0, 2))
    dx = None
    if need_input_grad:
        dcols = np.matmul(kernel.reshape(d, -1).T, g)
        if _is_pointwise(kernel, stride, padding):
            dx = dcols.reshape(n, c, h, w)
        else:
            dx = _impl.col2im(np.ascontiguousarray(dcols), c, h, w, kh, kw, stride, padding)
    return dx, dkernel, dbias


def transpose01(kernel):
    """Swap the first two axes: (D, C, K, K) -> (C, D, K, K)."""
    return np.ascontiguousarray(kernel.transpose(1, 0, 2, 3))


def row_norms(kernel):
    """Euclidean norm of each output channel's flattened parameters."""
    flat = kernel.reshape(kernel.shape[0], -1)
    return np.sqrt(np.einsum("ij,ij->i", flat, flat, dtype=np.float64)).astype(kernel.dtype, copy=False)
