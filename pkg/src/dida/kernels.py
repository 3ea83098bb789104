"""Convolution kernel backend, chosen once at import.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``DIDA_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

if os.environ.get("DIDA_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl
        BACKEND = "python"


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv_forward(x, w, stride, pad):
    return _impl.conv_forward(_c64(x), _c64(w), stride, pad)


def conv_grad_input(g, w, stride, pad, height, width):
    return _impl.conv_grad_input(_c64(g), _c64(w), stride, pad, height, width)


def conv_grad_weight(x, g, stride, pad, kh, kw):
    return _impl.conv_grad_weight(_c64(x), _c64(g), stride, pad, kh, kw)
