# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: conv unfolding, bilinear upsampling, grid sampling.

Semantics mirror ifwm._kernels_np exactly (same coordinate convention, same
clamping); the numpy module is the reference, this one is the fast path.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef inline double _clampd(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def conv_out_len(int size, int k, int stride, int pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n * oh * ow, c * k * k), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t b, ci, oy, ox, ky, kx, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    for ci in range(c):
                        for ky in range(k):
                            iy = oy * stride - pad + ky
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * stride - pad + kx
                                if ix < 0 or ix >= w:
                                    continue
                                col = (ci * k + ky) * k + kx
                                cols[row, col] = x[b, ci, iy, ix]
    return out


def col2im(floating[:, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, ci, oy, ox, ky, kx, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    for ci in range(c):
                        for ky in range(k):
                            iy = oy * stride - pad + ky
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox * stride - pad + kx
                                if ix < 0 or ix >= w:
                                    continue
                                col = (ci * k + ky) * k + kx
                                gx[b, ci, iy, ix] += cols[row, col]
    return out


def upsample_fwd(floating[:, :, :, ::1] x, int factor):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h * factor, wo = w * factor
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ci, oy, ox, y0, y1, x0, x1
    cdef double cy, cx, sy_scale = <double>h / <double>ho, sx_scale = <double>w / <double>wo
    cdef floating wy, wx, top, bot
    with nogil:
        for oy in range(ho):
            cy = _clampd((<double>oy + 0.5) * sy_scale - 0.5, 0.0, <double>h - 1.0)
            y0 = <Py_ssize_t>floor(cy)
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            wy = <floating>(cy - <double>y0)
            for ox in range(wo):
                cx = _clampd((<double>ox + 0.5) * sx_scale - 0.5, 0.0, <double>w - 1.0)
                x0 = <Py_ssize_t>floor(cx)
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                wx = <floating>(cx - <double>x0)
                for b in range(n):
                    for ci in range(c):
                        top = x[b, ci, y0, x0] * (1 - wx) + x[b, ci, y0, x1] * wx
                        bot = x[b, ci, y1, x0] * (1 - wx) + x[b, ci, y1, x1] * wx
                        y[b, ci, oy, ox] = top * (1 - wy) + bot * wy
    return out


def upsample_bwd(floating[:, :, :, ::1] gy, int factor):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t h = ho // factor, w = wo // factor
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, ci, oy, ox, y0, y1, x0, x1
    cdef double cy, cx, sy_scale = <double>h / <double>ho, sx_scale = <double>w / <double>wo
    cdef floating wy, wx, g
    with nogil:
        for oy in range(ho):
            cy = _clampd((<double>oy + 0.5) * sy_scale - 0.5, 0.0, <double>h - 1.0)
            y0 = <Py_ssize_t>floor(cy)
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            wy = <floating>(cy - <double>y0)
            for ox in range(wo):
                cx = _clampd((<double>ox + 0.5) * sx_scale - 0.5, 0.0, <double>w - 1.0)
                x0 = <Py_ssize_t>floor(cx)
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                wx = <floating>(cx - <double>x0)
                for b in range(n):
                    for ci in range(c):
                        g = gy[b, ci, oy, ox]
                        gx[b, ci, y0, x0] += g * (1 - wx) * (1 - wy)
                        gx[b, ci, y0, x1] += g * wx * (1 - wy)
                        gx[b, ci, y1, x0] += g * (1 - wx) * wy
                        gx[b, ci, y1, x1] += g * wx * wy
    return out


def grid_sample_fwd(floating[:, :, :, ::1] src, floating[:, :, :, ::1] flow):
    cdef Py_ssize_t n = src.shape[0], c = src.shape[1], hs = src.shape[2], ws = src.shape[3]
    cdef Py_ssize_t H = flow.shape[2], W = flow.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.empty((n, c, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ci, oy, ox, y0, y1, x0, x1
    cdef double sy_scale = <double>hs / <double>H, sx_scale = <double>ws / <double>W
    cdef double sy, sx, syc, sxc
    cdef floating wy, wx, top, bot
    with nogil:
        for b in range(n):
            for oy in range(H):
                for ox in range(W):
                    sx = (<double>ox + 0.5) * sx_scale - 0.5 + <double>flow[b, 0, oy, ox]
                    sy = (<double>oy + 0.5) * sy_scale - 0.5 + <double>flow[b, 1, oy, ox]
                    sxc = _clampd(sx, 0.0, <double>ws - 1.0)
                    syc = _clampd(sy, 0.0, <double>hs - 1.0)
                    x0 = <Py_ssize_t>floor(sxc)
                    y0 = <Py_ssize_t>floor(syc)
                    x1 = x0 + 1 if x0 + 1 < ws else ws - 1
                    y1 = y0 + 1 if y0 + 1 < hs else hs - 1
                    wx = <floating>(sxc - <double>x0)
                    wy = <floating>(syc - <double>y0)
                    for ci in range(c):
                        top = src[b, ci, y0, x0] * (1 - wx) + src[b, ci, y0, x1] * wx
                        bot = src[b, ci, y1, x0] * (1 - wx) + src[b, ci, y1, x1] * wx
                        y[b, ci, oy, ox] = top * (1 - wy) + bot * wy
    return out


def grid_sample_bwd(floating[:, :, :, ::1] gy, floating[:, :, :, ::1] src,
                    floating[:, :, :, ::1] flow):
    cdef Py_ssize_t n = src.shape[0], c = src.shape[1], hs = src.shape[2], ws = src.shape[3]
    cdef Py_ssize_t H = flow.shape[2], W = flow.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gsrc_arr = np.zeros((n, c, hs, ws), dtype=dtype)
    gflow_arr = np.zeros((n, 2, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] gsrc = gsrc_arr
    cdef floating[:, :, :, ::1] gflow = gflow_arr
    cdef Py_ssize_t b, ci, oy, ox, y0, y1, x0, x1
    cdef double sy_scale = <double>hs / <double>H, sx_scale = <double>ws / <double>W
    cdef double sy, sx, syc, sxc
    cdef floating wy, wx, g, v00, v01, v10, v11, gdx, gdy
    cdef bint in_x, in_y
    with nogil:
        for b in range(n):
            for oy in range(H):
                for ox in range(W):
                    sx = (<double>ox + 0.5) * sx_scale - 0.5 + <double>flow[b, 0, oy, ox]
                    sy = (<double>oy + 0.5) * sy_scale - 0.5 + <double>flow[b, 1, oy, ox]
                    in_x = 0.0 < sx < <double>ws - 1.0
                    in_y = 0.0 < sy < <double>hs - 1.0
                    sxc = _clampd(sx, 0.0, <double>ws - 1.0)
                    syc = _clampd(sy, 0.0, <double>hs - 1.0)
                    x0 = <Py_ssize_t>floor(sxc)
                    y0 = <Py_ssize_t>floor(syc)
                    x1 = x0 + 1 if x0 + 1 < ws else ws - 1
                    y1 = y0 + 1 if y0 + 1 < hs else hs - 1
                    wx = <floating>(sxc - <double>x0)
                    wy = <floating>(syc - <double>y0)
                    gdx = 0
                    gdy = 0
                    for ci in range(c):
                        g = gy[b, ci, oy, ox]
                        gsrc[b, ci, y0, x0] += g * (1 - wx) * (1 - wy)
                        gsrc[b, ci, y0, x1] += g * wx * (1 - wy)
                        gsrc[b, ci, y1, x0] += g * (1 - wx) * wy
                        gsrc[b, ci, y1, x1] += g * wx * wy
                        v00 = src[b, ci, y0, x0]
                        v01 = src[b, ci, y0, x1]
                        v10 = src[b, ci, y1, x0]
                        v11 = src[b, ci, y1, x1]
                        gdx = gdx + g * ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
                        gdy = gdy + g * ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
                    if in_x:
                        gflow[b, 0, oy, ox] = gdx
                    if in_y:
                        gflow[b, 1, oy, ox] = gdy
    return gsrc_arr, gflow_arr
