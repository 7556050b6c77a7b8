# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: rasterization, valid NCHW conv2d, bilinear texture ops.

Same contracts and arithmetic as the numpy fallback in ``_impl_py``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor, INFINITY

cnp.import_array()

cdef double _EDGE_EPS = 1e-12


def raster_triangles(xy_in, z_in, int height, int width):
    cdef double[:, :, ::1] xy = np.ascontiguousarray(xy_in, dtype=np.float64)
    cdef double[:, ::1] z = np.ascontiguousarray(z_in, dtype=np.float64)
    tri_np = np.full((height, width), -1, dtype=np.int32)
    zbuf_np = np.full((height, width), np.inf, dtype=np.float64)
    bary_np = np.zeros((height, width, 3), dtype=np.float64)
    cdef cnp.int32_t[:, ::1] tri_id = tri_np
    cdef double[:, ::1] zbuf = zbuf_np
    cdef double[:, :, ::1] bary = bary_np

    cdef Py_ssize_t t, ntri = xy.shape[0]
    cdef int ix, iy, ix_lo, ix_hi, iy_lo, iy_hi
    cdef double x0, y0, x1, y1, x2, y2, den, mn, mx
    cdef double px, py, l0, l1, l2, inv_d, depth

    for t in range(ntri):
        x0 = xy[t, 0, 0]; y0 = xy[t, 0, 1]
        x1 = xy[t, 1, 0]; y1 = xy[t, 1, 1]
        x2 = xy[t, 2, 0]; y2 = xy[t, 2, 1]
        den = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if den < 1e-18 and den > -1e-18:
            continue
        mn = min(x0, min(x1, x2)); mx = max(x0, max(x1, x2))
        ix_lo = <int>floor(mn - 0.5)
        ix_hi = <int>ceil(mx - 0.5)
        if ix_lo < 0: ix_lo = 0
        if ix_hi > width - 1: ix_hi = width - 1
        mn = min(y0, min(y1, y2)); mx = max(y0, max(y1, y2))
        iy_lo = <int>floor(mn - 0.5)
        iy_hi = <int>ceil(mx - 0.5)
        if iy_lo < 0: iy_lo = 0
        if iy_hi > height - 1: iy_hi = height - 1
        for iy in range(iy_lo, iy_hi + 1):
            py = iy + 0.5
            for ix in range(ix_lo, ix_hi + 1):
                px = ix + 0.5
                l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / den
                if l0 < -_EDGE_EPS:
                    continue
                l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / den
                if l1 < -_EDGE_EPS:
                    continue
                l2 = 1.0 - l0 - l1
                if l2 < -_EDGE_EPS:
                    continue
                inv_d = l0 / z[t, 0] + l1 / z[t, 1] + l2 / z[t, 2]
                depth = 1.0 / inv_d
                if depth < zbuf[iy, ix]:
                    zbuf[iy, ix] = depth
                    tri_id[iy, ix] = <cnp.int32_t>t
                    bary[iy, ix, 0] = l0
                    bary[iy, ix, 1] = l1
                    bary[iy, ix, 2] = l2
    return tri_np, zbuf_np, bary_np


def conv2d_forward(x_in, w_in, b_in, int stride):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1, wo = (wd - kw) // stride + 1
    y_np = np.empty((n, f, ho, wo), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_np
    cdef Py_ssize_t i, j, oy, ox, ci, ky, kx
    cdef double acc
    for i in range(n):
        for j in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    acc = b[j]
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += x[i, ci, oy * stride + ky, ox * stride + kx] * w[j, ci, ky, kx]
                    y[i, j, oy, ox] = acc
    return y_np


def conv2d_grad_input(gy_in, w_in, int stride, int h, int wd):
    cdef double[:, :, :, ::1] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gx_np = np.zeros((n, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_np
    cdef Py_ssize_t i, j, oy, ox, ci, ky, kx
    cdef double g
    for i in range(n):
        for j in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    g = gy[i, j, oy, ox]
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                gx[i, ci, oy * stride + ky, ox * stride + kx] += g * w[j, ci, ky, kx]
    return gx_np


def conv2d_grad_weight(gy_in, x_in, int stride, int kh, int kw):
    cdef double[:, :, :, ::1] gy = np.ascontiguousarray(gy_in, dtype=np.float64)
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t n = gy.shape[0], f = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t c = x.shape[1]
    gw_np = np.zeros((f, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_np
    cdef Py_ssize_t i, j, oy, ox, ci, ky, kx
    cdef double g
    for i in range(n):
        for j in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    g = gy[i, j, oy, ox]
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                gw[j, ci, ky, kx] += g * x[i, ci, oy * stride + ky, ox * stride + kx]
    return gw_np


def bilinear_gather(tex_in, iy0_in, ix0_in, fy_in, fx_in):
    cdef double[:, :, ::1] tex = np.ascontiguousarray(tex_in, dtype=np.float64)
    cdef cnp.int64_t[::1] iy0 = np.ascontiguousarray(iy0_in, dtype=np.int64)
    cdef cnp.int64_t[::1] ix0 = np.ascontiguousarray(ix0_in, dtype=np.int64)
    cdef double[::1] fy = np.ascontiguousarray(fy_in, dtype=np.float64)
    cdef double[::1] fx = np.ascontiguousarray(fx_in, dtype=np.float64)
    cdef Py_ssize_t p, npix = iy0.shape[0]
    out_np = np.empty((npix, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef double w00, w01, w10, w11
    cdef Py_ssize_t ch, y0, x0
    for p in range(npix):
        w00 = (1.0 - fy[p]) * (1.0 - fx[p])
        w01 = (1.0 - fy[p]) * fx[p]
        w10 = fy[p] * (1.0 - fx[p])
        w11 = fy[p] * fx[p]
        y0 = iy0[p]; x0 = ix0[p]
        for ch in range(3):
            out[p, ch] = (w00 * tex[y0, x0, ch] + w01 * tex[y0, x0 + 1, ch]
                          + w10 * tex[y0 + 1, x0, ch] + w11 * tex[y0 + 1, x0 + 1, ch])
    return out_np


def bilinear_scatter(gout_in, iy0_in, ix0_in, fy_in, fx_in, int height, int width):
    cdef double[:, ::1] gout = np.ascontiguousarray(gout_in, dtype=np.float64)
    cdef cnp.int64_t[::1] iy0 = np.ascontiguousarray(iy0_in, dtype=np.int64)
    cdef cnp.int64_t[::1] ix0 = np.ascontiguousarray(ix0_in, dtype=np.int64)
    cdef double[::1] fy = np.ascontiguousarray(fy_in, dtype=np.float64)
    cdef double[::1] fx = np.ascontiguousarray(fx_in, dtype=np.float64)
    gtex_np = np.zeros((height, width, 3), dtype=np.float64)
    cdef double[:, :, ::1] gtex = gtex_np
    cdef Py_ssize_t p, npix = iy0.shape[0], ch
    cdef double w
    # Four sequential passes, same accumulation order as the numpy fallback's
    # np.add.at calls, so both backends agree on overlapping texels.
    for p in range(npix):
        w = (1.0 - fy[p]) * (1.0 - fx[p])
        for ch in range(3):
            gtex[iy0[p], ix0[p], ch] += w * gout[p, ch]
    for p in range(npix):
        w = (1.0 - fy[p]) * fx[p]
        for ch in range(3):
            gtex[iy0[p], ix0[p] + 1, ch] += w * gout[p, ch]
    for p in range(npix):
        w = fy[p] * (1.0 - fx[p])
        for ch in range(3):
            gtex[iy0[p] + 1, ix0[p], ch] += w * gout[p, ch]
    for p in range(npix):
        w = fy[p] * fx[p]
        for ch in range(3):
            gtex[iy0[p] + 1, ix0[p] + 1, ch] += w * gout[p, ch]
    return gtex_np
