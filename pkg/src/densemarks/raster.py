"""Vectorized triangle rasterizer with a z-buffer.

Pixels are sampled at integer coordinates. Coverage uses edge functions with
the top-left rule, so a pixel on an edge shared by two triangles belongs to
exactly one of them. Depth ties go to the lower triangle index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAR = 1e-3


@dataclass
class Fragments:
    face: np.ndarray  # (H, W) int64, -1 for background
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics
    depth: np.ndarray  # (H, W) camera-space z, inf for background

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0


def _edge(ax, ay, bx, by, qx, qy):
    return (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)


def _top_left(ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize(xy: np.ndarray, z: np.ndarray, faces: np.ndarray, width: int, height: int) -> Fragments:
    """Rasterize projected vertices ``xy (V, 2)`` with camera depths ``z (V,)``."""
    faces = np.asarray(faces, dtype=np.int64)
    face_ids = np.arange(len(faces))
    fz = z[faces]
    keep = np.all(fz > NEAR, axis=1) & np.all(np.isfinite(xy[faces]), axis=(1, 2))
    faces, face_ids = faces[keep], face_ids[keep]

    p = xy[faces]  # (F, 3, 2)
    area = _edge(p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1], p[:, 2, 0], p[:, 2, 1])
    # both windings are drawn; flip negative ones so the inside test is uniform
    neg = area < 0
    faces = faces.copy()
    faces[neg] = faces[neg][:, [0, 2, 1]]
    p = xy[faces]
    area = np.abs(area)
    nz = area > 0
    faces, face_ids, p, area, neg = faces[nz], face_ids[nz], p[nz], area[nz], neg[nz]

    x0 = np.clip(np.ceil(p[:, :, 0].min(axis=1)), 0, width).astype(np.int64)
    x1 = np.clip(np.floor(p[:, :, 0].max(axis=1)), -1, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(p[:, :, 1].min(axis=1)), 0, height).astype(np.int64)
    y1 = np.clip(np.floor(p[:, :, 1].max(axis=1)), -1, height - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    count = bw * bh
    total = int(count.sum())

    face_buf = np.full(height * width, -1, dtype=np.int64)
    bary_buf = np.zeros((height * width, 3))
    depth_buf = np.full(height * width, np.inf)
    if total == 0:
        return Fragments(face_buf.reshape(height, width), bary_buf.reshape(height, width, 3),
                         depth_buf.reshape(height, width))

    # enumerate every (triangle, pixel-in-bbox) candidate
    tri = np.repeat(np.arange(len(faces)), count)
    offset = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
    qx = (x0[tri] + offset % bw[tri]).astype(np.float64)
    qy = (y0[tri] + offset // bw[tri]).astype(np.float64)

    pt = p[tri]
    ax, ay = pt[:, 0, 0], pt[:, 0, 1]
    bx, by = pt[:, 1, 0], pt[:, 1, 1]
    cx, cy = pt[:, 2, 0], pt[:, 2, 1]
    w0 = _edge(bx, by, cx, cy, qx, qy)
    w1 = _edge(cx, cy, ax, ay, qx, qy)
    w2 = _edge(ax, ay, bx, by, qx, qy)
    inside = (
        ((w0 > 0) | ((w0 == 0) & _top_left(bx, by, cx, cy)))
        & ((w1 > 0) | ((w1 == 0) & _top_left(cx, cy, ax, ay)))
        & ((w2 > 0) | ((w2 == 0) & _top_left(ax, ay, bx, by)))
    )
    tri, qx, qy = tri[inside], qx[inside], qy[inside]
    lam = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / area[tri][:, None]

    inv_z = lam / z[faces[tri]]
    denom = inv_z.sum(axis=1)
    depth = 1.0 / denom
    bary = inv_z / denom[:, None]
    flip = neg[tri]
    bary[flip] = bary[flip][:, [0, 2, 1]]
    pix = qy.astype(np.int64) * width + qx.astype(np.int64)
    fid = face_ids[tri]

    order = np.lexsort((fid, depth, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    face_buf[pix[win]] = fid[win]
    bary_buf[pix[win]] = bary[win]
    depth_buf[pix[win]] = depth[win]
    return Fragments(face_buf.reshape(height, width), bary_buf.reshape(height, width, 3),
                     depth_buf.reshape(height, width))


def interpolate(frags: Fragments, faces: np.ndarray, attrs: np.ndarray) -> np.ndarray:
    """Interpolate per-vertex ``attrs (V, C)`` over covered pixels; zeros elsewhere."""
    out = np.zeros(frags.face.shape + (attrs.shape[1],))
    m = frags.mask
    tri = np.asarray(faces)[frags.face[m]]  # (N, 3)
    out[m] = np.einsum("nk,nkc->nc", frags.bary[m], attrs[tri])
    return out
