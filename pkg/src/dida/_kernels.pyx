# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (direct loops, GIL released).

Every kernel walks (out-channel, in-channel, kernel tap) on the outside and
an output row on the inside, with the valid column range clipped up front so
the innermost loop carries no bounds tests.
"""
import numpy as np

cdef inline Py_ssize_t _first_valid(Py_ssize_t offset, Py_ssize_t stride) nogil:
    # smallest j >= 0 with j * stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t offset, Py_ssize_t stride, Py_ssize_t n,
                                  Py_ssize_t limit) nogil:
    # one past the largest j < limit with j * stride + offset < n
    cdef Py_ssize_t e
    if n - 1 - offset < 0:
        return 0
    e = (n - 1 - offset) // stride + 1
    return e if e < limit else limit


def conv_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                 Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((O, Ho, Wo))
    cdef double[:, :, ::1] y = out
    cdef Py_ssize_t o, c, i, j, u, v, r, i0, i1, j0, j1, off
    cdef double wv
    cdef const double *xr
    cdef double *yr
    with nogil:
        for o in range(O):
            for c in range(C):
                for u in range(kh):
                    i0 = _first_valid(u - pad, stride)
                    i1 = _end_valid(u - pad, stride, H, Ho)
                    for v in range(kw):
                        wv = w[o, c, u, v]
                        off = v - pad
                        j0 = _first_valid(off, stride)
                        j1 = _end_valid(off, stride, W, Wo)
                        for i in range(i0, i1):
                            r = i * stride + u - pad
                            xr = &x[c, r, 0]
                            yr = &y[o, i, 0]
                            if stride == 1:
                                for j in range(j0, j1):
                                    yr[j] += wv * xr[j + off]
                            else:
                                for j in range(j0, j1):
                                    yr[j] += wv * xr[j * stride + off]
    return out


def conv_grad_input(const double[:, :, ::1] g, const double[:, :, :, ::1] w,
                    Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t O = w.shape[0], C = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = g.shape[1], Wo = g.shape[2]
    out = np.zeros((C, height, width))
    cdef double[:, :, ::1] gx = out
    cdef Py_ssize_t o, c, i, j, u, v, r, i0, i1, j0, j1, off
    cdef double wv
    cdef const double *gr
    cdef double *xr
    with nogil:
        for o in range(O):
            for c in range(C):
                for u in range(kh):
                    i0 = _first_valid(u - pad, stride)
                    i1 = _end_valid(u - pad, stride, height, Ho)
                    for v in range(kw):
                        wv = w[o, c, u, v]
                        off = v - pad
                        j0 = _first_valid(off, stride)
                        j1 = _end_valid(off, stride, width, Wo)
                        for i in range(i0, i1):
                            r = i * stride + u - pad
                            gr = &g[o, i, 0]
                            xr = &gx[c, r, 0]
                            if stride == 1:
                                for j in range(j0, j1):
                                    xr[j + off] += wv * gr[j]
                            else:
                                for j in range(j0, j1):
                                    xr[j * stride + off] += wv * gr[j]
    return out


def conv_grad_weight(const double[:, :, ::1] x, const double[:, :, ::1] g,
                     Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = g.shape[0], Ho = g.shape[1], Wo = g.shape[2]
    out = np.zeros((O, C, kh, kw))
    cdef double[:, :, :, ::1] gw = out
    cdef Py_ssize_t o, c, i, j, u, v, r, i0, i1, j0, j1, off
    cdef double acc
    cdef const double *xr
    cdef const double *gr
    with nogil:
        for o in range(O):
            for c in range(C):
                for u in range(kh):
                    i0 = _first_valid(u - pad, stride)
                    i1 = _end_valid(u - pad, stride, H, Ho)
                    for v in range(kw):
                        off = v - pad
                        j0 = _first_valid(off, stride)
                        j1 = _end_valid(off, stride, W, Wo)
                        acc = 0.0
                        for i in range(i0, i1):
                            r = i * stride + u - pad
                            xr = &x[c, r, 0]
                            gr = &g[o, i, 0]
                            if stride == 1:
                                for j in range(j0, j1):
                                    acc += gr[j] * xr[j + off]
                            else:
                                for j in range(j0, j1):
                                    acc += gr[j] * xr[j * stride + off]
                        gw[o, c, u, v] = acc
    return out
