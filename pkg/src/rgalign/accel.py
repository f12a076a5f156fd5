"""Loop-shaped hot kernels: numba-jitted with a pure-numpy fallback.

The fallback path is selected by setting the environment variable
RGALIGN_NO_NUMBA=1 (or automatically when numba is not installed).
Matrix products elsewhere in the package stay on numpy/BLAS; only the
kernels that are genuinely loop-bound live here.

Box pooling convention: boxes are pixel-space corner rectangles
(x0, y0, x1, y1). Each output cell is split into a regular 2x2 sample
grid; samples are bilinearly interpolated between pixel centers
(pixel (r, c) has its center at (c + 0.5, r + 0.5)) with edge clamping,
then averaged.
"""

from __future__ import annotations

import os

import numpy as np

_want_numba = os.environ.get("RGALIGN_NO_NUMBA", "0") != "1"

if _want_numba:
    try:
        from numba import njit
        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False
else:
    HAS_NUMBA = False


def backend_name():
    return "numba" if HAS_NUMBA else "numpy"


def _pool_regions_numpy(images, boxes, owners, out_h, out_w):
    """Vectorized bilinear box pooling over a batch of regions."""
    n_img, height, width, chans = images.shape
    n_box = boxes.shape[0]
    out = np.empty((n_box, out_h, out_w, chans), dtype=images.dtype)

    # sample offsets: 2x2 regular grid inside each output cell
    offs = np.array([0.25, 0.75])
    jj = np.arange(out_w)[:, None]
    ii = np.arange(out_h)[:, None]

    for b in range(n_box):
        x0, y0, x1, y1 = boxes[b]
        bin_w = (x1 - x0) / out_w
        bin_h = (y1 - y0) / out_h
        xs = (x0 + (jj + offs) * bin_w).reshape(-1)          # (out_w*2,)
        ys = (y0 + (ii + offs) * bin_h).reshape(-1)          # (out_h*2,)
        # to pixel-center coordinates, clamped to the valid lattice
        u = np.clip(xs - 0.5, 0.0, width - 1.0)
        v = np.clip(ys - 0.5, 0.0, height - 1.0)
        u0 = np.minimum(u.astype(np.int64), width - 2) if width > 1 else np.zeros(u.shape, np.int64)
        v0 = np.minimum(v.astype(np.int64), height - 2) if height > 1 else np.zeros(v.shape, np.int64)
        fu = (u - u0)[None, :, None]                          # (1, W2, 1)
        fv = (v - v0)[:, None, None]                          # (H2, 1, 1)
        img = images[owners[b]]
        p00 = img[v0][:, u0]                                  # (H2, W2, C)
        p01 = img[v0][:, np.minimum(u0 + 1, width - 1)]
        p10 = img[np.minimum(v0 + 1, height - 1)][:, u0]
        p11 = img[np.minimum(v0 + 1, height - 1)][:, np.minimum(u0 + 1, width - 1)]
        sampled = (p00 * (1 - fv) * (1 - fu) + p01 * (1 - fv) * fu
                   + p10 * fv * (1 - fu) + p11 * fv * fu)     # (H2, W2, C)
        # average the 2x2 samples of each cell
        cells = sampled.reshape(out_h, 2, out_w, 2, chans)
        out[b] = cells.mean(axis=(1, 3))
    return out


if HAS_NUMBA:

    @njit(cache=True)
    def _pool_regions_jit(images, boxes, owners, out_h, out_w):
        n_img, height, width, chans = images.shape
        n_box = boxes.shape[0]
        out = np.empty((n_box, out_h, out_w, chans), dtype=images.dtype)
        for b in range(n_box):
            img = images[owners[b]]
            x0 = boxes[b, 0]
            y0 = boxes[b, 1]
            x1 = boxes[b, 2]
            y1 = boxes[b, 3]
            bin_w = (x1 - x0) / out_w
            bin_h = (y1 - y0) / out_h
            for i in range(out_h):
                for j in range(out_w):
                    for c in range(chans):
                        out[b, i, j, c] = 0.0
                    for sy in range(2):
                        y = y0 + (i + 0.25 + 0.5 * sy) * bin_h
                        v = y - 0.5
                        if v < 0.0:
                            v = 0.0
                        if v > height - 1.0:
                            v = height - 1.0
                        v0 = int(v)
                        if v0 > height - 2:
                            v0 = height - 2
                        if v0 < 0:
                            v0 = 0
                        fv = v - v0
                        v1 = v0 + 1
                        if v1 > height - 1:
                            v1 = height - 1
                        for sx in range(2):
                            x = x0 + (j + 0.25 + 0.5 * sx) * bin_w
                            u = x - 0.5
                            if u < 0.0:
                                u = 0.0
                            if u > width - 1.0:
                                u = width - 1.0
                            u0 = int(u)
                            if u0 > width - 2:
                                u0 = width - 2
                            if u0 < 0:
                                u0 = 0
                            fu = u - u0
                            u1 = u0 + 1
                            if u1 > width - 1:
                                u1 = width - 1
                            for c in range(chans):
                                val = (img[v0, u0, c] * (1 - fv) * (1 - fu)
                                       + img[v0, u1, c] * (1 - fv) * fu
                                       + img[v1, u0, c] * fv * (1 - fu)
                                       + img[v1, u1, c] * fv * fu)
                                out[b, i, j, c] += val
                    for c in range(chans):
                        out[b, i, j, c] *= 0.25
        return out


def pool_regions(images, boxes, owners, out_h, out_w):
    """Bilinear-pool `boxes` (pixel corners, one owner image each) to (out_h, out_w).

    images: (B, H, W, C) float array; boxes: (R, 4) float; owners: (R,) int.
    Returns (R, out_h, out_w, C).
    """
    images = np.ascontiguousarray(images)
    boxes = np.ascontiguousarray(boxes, dtype=images.dtype)
    owners = np.ascontiguousarray(owners, dtype=np.int64)
    if HAS_NUMBA:
        return _pool_regions_jit(images, boxes, owners, out_h, out_w)
    return _pool_regions_numpy(images, boxes, owners, out_h, out_w)
