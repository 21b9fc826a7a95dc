# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, Py_ssize_t r, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - r) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - r) // stride + 1
    out = np.empty((b * oh * ow, c * r * r), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t n, ch, j, k, y, xx, row, col, iy, ix
    with nogil:
        for n in range(b):
            for y in range(oh):
                for xx in range(ow):
                    row = (n * oh + y) * ow + xx
                    col = 0
                    for ch in range(c):
                        for j in range(r):
                            iy = y * stride + j - pad
                            for k in range(r):
                                ix = xx * stride + k - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    cols[row, col] = x[n, ch, iy, ix]
                                else:
                                    cols[row, col] = 0.0
                                col += 1
    return out


def col2im(cols_in, x_shape, Py_ssize_t r, Py_ssize_t stride, Py_ssize_t pad):
    cdef const double[:, ::1] cols = np.ascontiguousarray(cols_in, dtype=np.float64)
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - r) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - r) // stride + 1
    out = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, ch, j, k, y, xx, row, col, iy, ix
    with nogil:
        for n in range(b):
            for y in range(oh):
                for xx in range(ow):
                    row = (n * oh + y) * ow + xx
                    col = 0
                    for ch in range(c):
                        for j in range(r):
                            iy = y * stride + j - pad
                            for k in range(r):
                                ix = xx * stride + k - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    dx[n, ch, iy, ix] += cols[row, col]
                                col += 1
    return out


def maxpool_forward(const double[:, :, :, ::1] x, Py_ssize_t r, Py_ssize_t stride):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - r) // stride + 1
    cdef Py_ssize_t ow = (w - r) // stride + 1
    out_arr = np.empty((b, c, oh, ow), dtype=np.float64)
    arg_arr = np.empty((b, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, ch, y, xx, j, k, iy, ix, best_idx
    cdef double best, v
    with nogil:
        for n in range(b):
            for ch in range(c):
                for y in range(oh):
                    for xx in range(ow):
                        iy = y * stride
                        ix = xx * stride
                        best = x[n, ch, iy, ix]
                        best_idx = iy * w + ix
                        for j in range(r):
                            for k in range(r):
                                v = x[n, ch, iy + j, ix + k]
                                if v > best:
                                    best = v
                                    best_idx = (iy + j) * w + ix + k
                        out[n, ch, y, xx] = best
                        arg[n, ch, y, xx] = best_idx
    return out_arr, arg_arr


def maxpool_backward(dout_in, argmax_in, x_shape):
    cdef const double[:, ::1] dout = np.ascontiguousarray(dout_in, dtype=np.float64).reshape(
        x_shape[0] * x_shape[1], -1)
    cdef const cnp.int64_t[:, ::1] arg = np.ascontiguousarray(argmax_in, dtype=np.int64).reshape(
        x_shape[0] * x_shape[1], -1)
    out = np.zeros((x_shape[0] * x_shape[1], x_shape[2] * x_shape[3]), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, p
    with nogil:
        for i in range(dout.shape[0]):
            for p in range(dout.shape[1]):
                dx[i, arg[i, p]] += dout[i, p]
    return out.reshape(x_shape)


def gather_rows(const double[:, :] values, rows_in, starts_in, Py_ssize_t width):
    cdef const cnp.int64_t[::1] rows = np.ascontiguousarray(rows_in, dtype=np.int64)
    cdef const cnp.int64_t[::1] starts = np.ascontiguousarray(starts_in, dtype=np.int64)
    cdef Py_ssize_t n = rows.shape[0]
    out_arr = np.empty((n, width), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, rr, s0
    with nogil:
        for i in range(n):
            rr = rows[i]
            s0 = starts[i]
            for j in range(width):
                out[i, j] = values[rr, s0 + j]
    return out_arr
