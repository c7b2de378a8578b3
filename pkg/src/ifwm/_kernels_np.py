"""Pure-numpy reference kernels.

Fallback backend used when the compiled extension is unavailable (or forced
via IFWM_KERNELS=python).  Every function here must agree with the compiled
versions in ifwm._kernels; tests/test_kernels_backends.py holds the two
implementations together.

Coordinate convention (shared by upsample and grid sampling): output pixel i
maps to source coordinate (i + 0.5) * (src_len / out_len) - 0.5, clamped to
[0, src_len - 1] before the four-corner interpolation.  Keeping one convention
in both kernels is what makes zero-flow sampling reduce exactly to plain
upsampling.
"""

from __future__ import annotations

import numpy as np


def conv_out_len(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (n, c, h, w) into rows of (c*k*k) patch values.

    Row order is (n, oy, ox); column order is (c, ky, kx), matching a
    row-major (out_c, c, k, k) weight reshaped to (out_c, c*k*k).
    """
    n, c, h, w = x.shape
    oh = conv_out_len(h, k, stride, pad)
    ow = conv_out_len(w, k, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Fold patch-gradient rows back onto the (n, c, h, w) input, summing overlaps."""
    n, c, h, w = shape
    oh = conv_out_len(h, k, stride, pad)
    ow = conv_out_len(w, k, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, k, k)
    for ky in range(k):
        for kx in range(k):
            patch = cols6[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            xp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += patch
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + w])


def _axis_table(out_len: int, src_len: int, dtype) -> tuple:
    """Clamped corner indices and fractional weights along one axis.

    Coordinates are always computed in float64; only the final weights are
    cast, so f32 data still samples at exactly the same grid points.
    """
    scale = src_len / out_len
    coords = (np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5
    coords = np.clip(coords, 0.0, src_len - 1.0)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, src_len - 1)
    frac = (coords - i0).astype(dtype)
    return i0, i1, frac


def upsample_fwd(x: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = x.shape
    dt = x.dtype.type
    y0, y1, wy = _axis_table(h * factor, h, dt)
    x0, x1, wx = _axis_table(w * factor, w, dt)
    g00 = x[:, :, y0[:, None], x0[None, :]]
    g01 = x[:, :, y0[:, None], x1[None, :]]
    g10 = x[:, :, y1[:, None], x0[None, :]]
    g11 = x[:, :, y1[:, None], x1[None, :]]
    wxr = wx[None, None, None, :]
    wyr = wy[None, None, :, None]
    top = g00 * (1 - wxr) + g01 * wxr
    bot = g10 * (1 - wxr) + g11 * wxr
    return top * (1 - wyr) + bot * wyr


def upsample_bwd(gy: np.ndarray, factor: int) -> np.ndarray:
    n, c, ho, wo = gy.shape
    h, w = ho // factor, wo // factor
    dt = gy.dtype.type
    y0, y1, wy = _axis_table(ho, h, dt)
    x0, x1, wx = _axis_table(wo, w, dt)
    wxr = wx[None, None, None, :]
    wyr = wy[None, None, :, None]
    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    sl = slice(None)
    np.add.at(gx, (sl, sl, y0[:, None], x0[None, :]), gy * (1 - wxr) * (1 - wyr))
    np.add.at(gx, (sl, sl, y0[:, None], x1[None, :]), gy * wxr * (1 - wyr))
    np.add.at(gx, (sl, sl, y1[:, None], x0[None, :]), gy * (1 - wxr) * wyr)
    np.add.at(gx, (sl, sl, y1[:, None], x1[None, :]), gy * wxr * wyr)
    return gx


def _sample_coords(src_shape: tuple, flow: np.ndarray):
    """Per-pixel source coordinates for grid sampling: base grid + flow offsets."""
    hs, ws = src_shape
    n, _, H, W = flow.shape
    base_y = (np.arange(H, dtype=np.float64) + 0.5) * (hs / H) - 0.5
    base_x = (np.arange(W, dtype=np.float64) + 0.5) * (ws / W) - 0.5
    sx = base_x[None, None, :] + flow[:, 0]
    sy = base_y[None, :, None] + flow[:, 1]
    sxc = np.clip(sx, 0.0, ws - 1.0)
    syc = np.clip(sy, 0.0, hs - 1.0)
    x0 = np.floor(sxc).astype(np.intp)
    y0 = np.floor(syc).astype(np.intp)
    x1 = np.minimum(x0 + 1, ws - 1)
    y1 = np.minimum(y0 + 1, hs - 1)
    wx = (sxc - x0).astype(flow.dtype)
    wy = (syc - y0).astype(flow.dtype)
    return sx, sy, x0, x1, y0, y1, wx, wy


def _gather(src_flat: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # src_flat (n, c, hs*ws); idx (n, H*W) -> (n, c, H*W)
    n, c, _ = src_flat.shape
    idx3 = np.broadcast_to(idx[:, None, :], (n, c, idx.shape[1]))
    return np.take_along_axis(src_flat, idx3, axis=2)


def grid_sample_fwd(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    n, c, hs, ws = src.shape
    H, W = flow.shape[2], flow.shape[3]
    _, _, x0, x1, y0, y1, wx, wy = _sample_coords((hs, ws), flow)
    flat = src.reshape(n, c, hs * ws)
    i00 = (y0 * ws + x0).reshape(n, H * W)
    i01 = (y0 * ws + x1).reshape(n, H * W)
    i10 = (y1 * ws + x0).reshape(n, H * W)
    i11 = (y1 * ws + x1).reshape(n, H * W)
    v00 = _gather(flat, i00).reshape(n, c, H, W)
    v01 = _gather(flat, i01).reshape(n, c, H, W)
    v10 = _gather(flat, i10).reshape(n, c, H, W)
    v11 = _gather(flat, i11).reshape(n, c, H, W)
    wxr = wx[:, None]
    wyr = wy[:, None]
    top = v00 * (1 - wxr) + v01 * wxr
    bot = v10 * (1 - wxr) + v11 * wxr
    return top * (1 - wyr) + bot * wyr


def grid_sample_bwd(gy: np.ndarray, src: np.ndarray, flow: np.ndarray) -> tuple:
    """Gradients of grid_sample_fwd w.r.t. (src, flow).

    The flow gradient is masked to zero wherever the pre-clamp coordinate fell
    outside the source rectangle (border clamping has zero slope there).
    """
    n, c, hs, ws = src.shape
    H, W = flow.shape[2], flow.shape[3]
    sx, sy, x0, x1, y0, y1, wx, wy = _sample_coords((hs, ws), flow)
    flat = src.reshape(n, c, hs * ws)
    i00 = (y0 * ws + x0).reshape(n, H * W)
    i01 = (y0 * ws + x1).reshape(n, H * W)
    i10 = (y1 * ws + x0).reshape(n, H * W)
    i11 = (y1 * ws + x1).reshape(n, H * W)
    v00 = _gather(flat, i00).reshape(n, c, H, W)
    v01 = _gather(flat, i01).reshape(n, c, H, W)
    v10 = _gather(flat, i10).reshape(n, c, H, W)
    v11 = _gather(flat, i11).reshape(n, c, H, W)
    wxr = wx[:, None]
    wyr = wy[:, None]

    gsrc_1d = np.zeros(n * c * hs * ws, dtype=src.dtype)
    g = gy.reshape(n, c, H * W)
    wxf = wxr.reshape(n, 1, H * W)
    wyf = wyr.reshape(n, 1, H * W)
    # plane offset of each (n, c) image inside the flattened source
    plane = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (hs * ws)
    for idx, wgt in (
        (i00, (1 - wxf) * (1 - wyf)),
        (i01, wxf * (1 - wyf)),
        (i10, (1 - wxf) * wyf),
        (i11, wxf * wyf),
    ):
        np.add.at(gsrc_1d, (plane + idx[:, None, :]).ravel(), (g * wgt).ravel())
    gsrc = gsrc_1d.reshape(n, c, hs, ws)

    dvdx = (v01 - v00) * (1 - wyr) + (v11 - v10) * wyr
    dvdy = (v10 - v00) * (1 - wxr) + (v11 - v01) * wxr
    maskx = ((sx > 0.0) & (sx < ws - 1.0)).astype(flow.dtype)
    masky = ((sy > 0.0) & (sy < hs - 1.0)).astype(flow.dtype)
    gflow = np.empty_like(flow)
    gflow[:, 0] = (gy * dvdx).sum(axis=1) * maskx
    gflow[:, 1] = (gy * dvdy).sum(axis=1) * masky
    return gsrc, gflow
