# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Bit-identical to mltr.kernels.slow (tested)."""
import numpy as np

cimport cython
from libc.math cimport floor as c_floor

ctypedef fused floating:
    float
    double


def im2col(x_pad, int k, int s):
    x_pad = np.ascontiguousarray(x_pad)
    if x_pad.dtype == np.float32:
        return _im2col[float](x_pad, k, s)
    return _im2col[double](x_pad, k, s)


def col2im(cols, int c, int hp, int wp, int k, int s):
    cols = np.ascontiguousarray(cols)
    if cols.dtype == np.float32:
        return _col2im[float](cols, c, hp, wp, k, s)
    return _col2im[double](cols, c, hp, wp, k, s)


def scatter_add_rows(out, idx, rows):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    rows = np.ascontiguousarray(rows)
    if out.dtype == np.float32:
        _scatter_add_rows[float](out, idx, rows)
    else:
        _scatter_add_rows[double](out, idx, rows)


def clahe_apply(img, luts, int th, int tw):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    luts = np.ascontiguousarray(luts, dtype=np.float64)
    out = np.empty_like(img)
    _clahe_apply(img, luts, th, tw, out)
    return out


cdef _im2col(floating[:, :, ::1] x_pad, int k, int s):
    cdef int c = x_pad.shape[0]
    cdef int hp = x_pad.shape[1]
    cdef int wp = x_pad.shape[2]
    cdef int ho = (hp - k) // s + 1
    cdef int wo = (wp - k) // s + 1
    out_arr = np.empty((c * k * k, ho * wo),
                       dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef int ch, ki, kj, oy, ox, r, col
    for ch in range(c):
        for ki in range(k):
            for kj in range(k):
                r = ch * k * k + ki * k + kj
                col = 0
                for oy in range(ho):
                    for ox in range(wo):
                        out[r, col] = x_pad[ch, oy * s + ki, ox * s + kj]
                        col += 1
    return out_arr


cdef _col2im(floating[:, ::1] cols, int c, int hp, int wp, int k, int s):
    cdef int ho = (hp - k) // s + 1
    cdef int wo = (wp - k) // s + 1
    out_arr = np.zeros((c, hp, wp),
                       dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] out = out_arr
    cdef int ch, ki, kj, oy, ox, r, col
    for ch in range(c):
        for ki in range(k):
            for kj in range(k):
                r = ch * k * k + ki * k + kj
                col = 0
                for oy in range(ho):
                    for ox in range(wo):
                        out[ch, oy * s + ki, ox * s + kj] += cols[r, col]
                        col += 1
    return out_arr


cdef _scatter_add_rows(floating[:, ::1] out, const long[::1] idx,
                       floating[:, ::1] rows):
    cdef Py_ssize_t m = rows.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(d):
            out[idx[i], j] += rows[i, j]


cdef _clahe_apply(const unsigned char[:, ::1] img, double[:, :, ::1] luts,
                  int th, int tw, unsigned char[:, ::1] out):
    cdef int h = img.shape[0]
    cdef int w = img.shape[1]
    cdef int ty = luts.shape[0]
    cdef int tx = luts.shape[1]
    cdef int y, x, y0, x0, y1, x1, v
    cdef double fy, fx, wy, wx, val
    for y in range(h):
        fy = (y + 0.5) / th - 0.5
        if fy < 0.0:
            fy = 0.0
        if fy > ty - 1.0:
            fy = ty - 1.0
        y0 = <int>c_floor(fy)
        wy = fy - y0
        y1 = y0 + 1
        if y1 > ty - 1:
            y1 = ty - 1
        for x in range(w):
            fx = (x + 0.5) / tw - 0.5
            if fx < 0.0:
                fx = 0.0
            if fx > tx - 1.0:
                fx = tx - 1.0
            x0 = <int>c_floor(fx)
            wx = fx - x0
            x1 = x0 + 1
            if x1 > tx - 1:
                x1 = tx - 1
            v = img[y, x]
            val = (1.0 - wy) * ((1.0 - wx) * luts[y0, x0, v] + wx * luts[y0, x1, v]) \
                + wy * ((1.0 - wx) * luts[y1, x0, v] + wx * luts[y1, x1, v])
            val = c_floor(val + 0.5)
            if val < 0.0:
                val = 0.0
            if val > 255.0:
                val = 255.0
            out[y, x] = <unsigned char>val
