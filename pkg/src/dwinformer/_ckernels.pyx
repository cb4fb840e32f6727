# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xpad, int kh, int kw, int stride, int oh, int ow):
    cdef Py_ssize_t n = xpad.shape[0], c = xpad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, oh, ow, kh, kw, c), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, k
    with nogil:
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for k in range(c):
                                out[b, y, x, i, j, k] = xpad[b, y * stride + i, x * stride + j, k]
    return out_arr


def col2im(real[:, :, :, :, :, ::1] dcols, int hp, int wp, int stride):
    cdef Py_ssize_t n = dcols.shape[0], oh = dcols.shape[1], ow = dcols.shape[2]
    cdef Py_ssize_t kh = dcols.shape[3], kw = dcols.shape[4], c = dcols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, hp, wp, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, k
    with nogil:
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for k in range(c):
                                out[b, y * stride + i, x * stride + j, k] += dcols[b, y, x, i, j, k]
    return out_arr


def dwconv_forward(real[:, :, :, ::1] xpad, real[:, :, ::1] w, int stride, int oh, int ow):
    cdef Py_ssize_t n = xpad.shape[0], kh = w.shape[0], kw = w.shape[1], c = w.shape[2]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, oh, ow, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, i, j, k
    with nogil:
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for k in range(c):
                                out[b, y, x, k] += xpad[b, y * stride + i, x * stride + j, k] * w[i, j, k]
    return out_arr


def dwconv_backward(real[:, :, :, ::1] xpad, real[:, :, ::1] w, real[:, :, :, ::1] dy, int stride):
    cdef Py_ssize_t n = xpad.shape[0], kh = w.shape[0], kw = w.shape[1], c = w.shape[2]
    cdef Py_ssize_t oh = dy.shape[1], ow = dy.shape[2]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((xpad.shape[0], xpad.shape[1], xpad.shape[2], c), dtype=dtype)
    dw_arr = np.zeros((kh, kw, c), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef real[:, :, ::1] dw = dw_arr
    cdef Py_ssize_t b, y, x, i, j, k
    cdef real g
    with nogil:
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for k in range(c):
                                g = dy[b, y, x, k]
                                dx[b, y * stride + i, x * stride + j, k] += g * w[i, j, k]
                                dw[i, j, k] += g * xpad[b, y * stride + i, x * stride + j, k]
    return dx_arr, dw_arr
