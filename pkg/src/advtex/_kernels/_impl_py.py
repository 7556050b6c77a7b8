"""Pure-numpy implementations of the hot kernels.

Drop-in fallback for the compiled module ``_impl_cy``. Every function here
must produce the same values as its compiled twin (same arithmetic, same
per-pixel/per-element evaluation order) so that a run is reproducible no
matter which backend got selected at import.
"""

import numpy as np

# Inclusive coverage margin: a pixel center exactly on a shared edge is
# claimed by both triangles and the z-test picks the winner deterministically.
_EDGE_EPS = 1e-12


def raster_triangles(xy, z, height, width):
    """Z-buffered rasterization of screen-space triangles.

    xy: (T, 3, 2) pixel coordinates of triangle corners.
    z:  (T, 3) camera-space depth (> 0) of each corner.

    Returns (tri_id, zbuf, bary):
      tri_id (H, W) int32, -1 where no triangle covers the pixel center;
      zbuf (H, W) perspective-correct depth, +inf background;
      bary (H, W, 3) screen-space barycentric coords of the winning triangle.
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    tri_id = np.full((height, width), -1, dtype=np.int32)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    bary = np.zeros((height, width, 3), dtype=np.float64)

    for t in range(xy.shape[0]):
        x0, y0 = xy[t, 0]
        x1, y1 = xy[t, 1]
        x2, y2 = xy[t, 2]
        den = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(den) < 1e-18:
            continue
        ix_lo = max(0, int(np.floor(min(x0, x1, x2) - 0.5)))
        ix_hi = min(width - 1, int(np.ceil(max(x0, x1, x2) - 0.5)))
        iy_lo = max(0, int(np.floor(min(y0, y1, y2) - 0.5)))
        iy_hi = min(height - 1, int(np.ceil(max(y0, y1, y2) - 0.5)))
        if ix_lo > ix_hi or iy_lo > iy_hi:
            continue
        px = np.arange(ix_lo, ix_hi + 1, dtype=np.float64) + 0.5
        py = np.arange(iy_lo, iy_hi + 1, dtype=np.float64) + 0.5
        pxg = px[None, :]
        pyg = py[:, None]
        l0 = ((y1 - y2) * (pxg - x2) + (x2 - x1) * (pyg - y2)) / den
        l1 = ((y2 - y0) * (pxg - x2) + (x0 - x2) * (pyg - y2)) / den
        l2 = 1.0 - l0 - l1
        cover = (l0 >= -_EDGE_EPS) & (l1 >= -_EDGE_EPS) & (l2 >= -_EDGE_EPS)
        if not cover.any():
            continue
        inv_d = l0 / z[t, 0] + l1 / z[t, 1] + l2 / z[t, 2]
        depth = 1.0 / inv_d
        win = zbuf[iy_lo : iy_hi + 1, ix_lo : ix_hi + 1]
        upd = cover & (depth < win)
        if not upd.any():
            continue
        win[upd] = depth[upd]
        tri_id[iy_lo : iy_hi + 1, ix_lo : ix_hi + 1][upd] = t
        sub = bary[iy_lo : iy_hi + 1, ix_lo : ix_hi + 1]
        sub[upd, 0] = l0[upd]
        sub[upd, 1] = l1[upd]
        sub[upd, 2] = l2[upd]
    return tri_id, zbuf, bary


def conv2d_forward(x, w, b, stride):
    """Valid (no padding) NCHW convolution. x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    cols = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    cols = cols[:, :, ::stride, ::stride]
    y = np.einsum("nchwij,fcij->nfhw", cols, w, optimize=True)
    y += b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_grad_input(gy, w, stride, h, wd):
    """Gradient of conv2d_forward wrt x. gy (N,F,Ho,Wo) -> (N,C,H,W)."""
    n, f, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gx = np.zeros((n, c, h, wd), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            patch = np.einsum("nfhw,fc->nchw", gy, w[:, :, ky, kx], optimize=True)
            gx[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += patch
    return gx


def conv2d_grad_weight(gy, x, stride, kh, kw):
    """Gradient of conv2d_forward wrt w. Returns (F,C,kh,kw)."""
    cols = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    cols = cols[:, :, ::stride, ::stride]
    return np.ascontiguousarray(np.einsum("nchwij,nfhw->fcij", cols, gy, optimize=True))


def bilinear_gather(tex, iy0, ix0, fy, fx):
    """Sample a (H,W,3) texture at P locations given integer cells + fractions."""
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = w00[:, None] * tex[iy0, ix0]
    out += w01[:, None] * tex[iy0, ix0 + 1]
    out += w10[:, None] * tex[iy0 + 1, ix0]
    out += w11[:, None] * tex[iy0 + 1, ix0 + 1]
    return out


def bilinear_scatter(gout, iy0, ix0, fy, fx, height, width):
    """Adjoint of bilinear_gather: scatter-add P pixel grads into a texture grad."""
    gtex = np.zeros((height, width, 3), dtype=np.float64)
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    np.add.at(gtex, (iy0, ix0), w00[:, None] * gout)
    np.add.at(gtex, (iy0, ix0 + 1), w01[:, None] * gout)
    np.add.at(gtex, (iy0 + 1, ix0), w10[:, None] * gout)
    np.add.at(gtex, (iy0 + 1, ix0 + 1), w11[:, None] * gout)
    return gtex
