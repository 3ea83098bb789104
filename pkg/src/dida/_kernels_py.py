"""Pure-numpy convolution kernels.

Fallback for the compiled ``_kernels`` extension; both expose the same three
functions with identical signatures. All arrays are float64 and C-contiguous.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv_forward(x, w, stride, pad):
    """Cross-correlate ``x`` (C,H,W) with ``w`` (O,C,kh,kw); no bias."""
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride, pad)
    return np.ascontiguousarray(np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])))


def conv_grad_input(g, w, stride, pad, height, width):
    """Adjoint of :func:`conv_forward` with respect to the input."""
    out_c, in_c, kh, kw = w.shape
    ho, wo = g.shape[1], g.shape[2]
    gp = np.zeros((in_c, height + 2 * pad + stride, width + 2 * pad + stride))
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(w[:, :, u, v], g, axes=(0, 0))
            gp[:, u:u + stride * ho:stride, v:v + stride * wo:stride] += contrib
    return np.ascontiguousarray(gp[:, pad:pad + height, pad:pad + width])


def conv_grad_weight(x, g, stride, pad, kh, kw):
    """Adjoint of :func:`conv_forward` with respect to the kernel."""
    win = _windows(x, kh, kw, stride, pad)
    ho, wo = g.shape[1], g.shape[2]
    win = win[:, :ho, :wo]
    return np.ascontiguousarray(np.tensordot(g, win, axes=([1, 2], [1, 2])))
