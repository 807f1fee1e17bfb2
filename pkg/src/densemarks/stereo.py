"""Multi-view reconstruction from canonical-coordinate maps.

Tracks are grown from the first view: every valid sample of the downsampled
first map looks up its nearest embedding in each other view and keeps the
match if the canonical coordinates agree. Tracks are triangulated with the
linear DLT and filtered by reprojection error.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, UVWMap
from .io import write_ply
from .matcher import nearest_brute

log = logging.getLogger(__name__)


class DegenerateTriangulation(ValueError):
    pass


class PointAtInfinity(DegenerateTriangulation):
    pass


@dataclass(frozen=True)
class StereoConfig:
    downsample_factor: float = 4.0
    min_track_len: int = 2
    uvw_tol: float = 0.05
    track_tol: float = 0.10
    reproj_thresh_px: float = 10.0
    subpixel_tol: float | None = 0.005  # None: integer-pixel observations, no localization gate

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.min_track_len < 2:
            raise ValueError("min_track_len must be >= 2")
        if self.track_tol < self.uvw_tol:
            raise ValueError("track_tol must be >= uvw_tol")
        if self.reproj_thresh_px < 0:
            raise ValueError("reproj_thresh_px must be nonnegative")
        if self.subpixel_tol is not None and self.subpixel_tol <= 0:
            raise ValueError("subpixel_tol must be positive")


@dataclass
class MultiViewTrack:
    key: np.ndarray  # canonical coordinate of the seed
    views: list  # view indices
    pixels: list  # (x, y) floats at full resolution
    seed: int = 0  # index of the seed sample in view 0

    def __len__(self):
        return len(self.views)


@dataclass
class Downsampled:
    coords: np.ndarray  # (h, w, 3) values at block centers
    valid: np.ndarray  # (h, w) all pixels of the block valid
    centers: np.ndarray  # (h, w, 2) full-resolution (x, y) of each block center


def downsample(m: UVWMap, factor: float) -> Downsampled:
    """Sample block centers; a block is valid only if every pixel in it is."""
    h, w = m.valid.shape
    nh, nw = int(h // factor), int(w // factor)

    def spans(n):
        lo = np.floor(np.arange(n) * factor).astype(int)
        hi = np.minimum(np.ceil((np.arange(n) + 1) * factor).astype(int), h if n == nh else w)
        ctr = np.floor(np.arange(n) * factor + factor / 2.0).astype(int)
        return lo, hi, ctr

    ylo, yhi, yc = spans(nh)
    xlo, xhi, xc = spans(nw)
    # all-valid test through a summed-area table
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(m.valid, axis=0), axis=1)
    cnt = (sat[yhi][:, xhi] - sat[ylo][:, xhi] - sat[yhi][:, xlo] + sat[ylo][:, xlo])
    full = np.outer(yhi - ylo, xhi - xlo)
    centers = np.stack(np.meshgrid(xc, yc), axis=-1)
    return Downsampled(m.coords[np.ix_(yc, xc)], cnt == full, centers)


def _bilinear(m: UVWMap, x: float, y: float):
    """Bilinear UVW at a sub-pixel location, or None unless all 4 neighbors are valid."""
    h, w = m.valid.shape
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    if x0 < 0 or y0 < 0 or x0 + 1 >= w or y0 + 1 >= h:
        return None
    if not m.valid[y0:y0 + 2, x0:x0 + 2].all():
        return None
    fx, fy = x - x0, y - y0
    c = m.coords
    return ((1 - fx) * (1 - fy) * c[y0, x0] + fx * (1 - fy) * c[y0, x0 + 1]
            + (1 - fx) * fy * c[y0 + 1, x0] + fx * fy * c[y0 + 1, x0 + 1])


class _Stencils:
    """Closed-form affine fits of every 2x2 pixel block of a map.

    A block whose four corners fall in one mesh triangle fits almost exactly;
    inverting such a fit gives the sub-pixel location of a canonical point.
    """

    def __init__(self, m: UVWMap):
        c, v = m.coords, m.valid
        c00, c10, c01, c11 = c[:-1, :-1], c[:-1, 1:], c[1:, :-1], c[1:, 1:]
        self.ok = v[:-1, :-1] & v[:-1, 1:] & v[1:, :-1] & v[1:, 1:]
        self.gx = 0.5 * ((c10 - c00) + (c11 - c01))
        self.gy = 0.5 * ((c01 - c00) + (c11 - c10))
        self.a = 0.25 * (c00 + c10 + c01 + c11) - 0.5 * (self.gx + self.gy)
        self.res = 0.25 * np.max(np.abs(c00 - c10 - c01 + c11), axis=-1)


def _quadratic(m: UVWMap, key, px, py, half=2):
    """Least-squares quadratic model around a pixel, inverted by Gauss-Newton."""
    h, w = m.valid.shape
    ys, xs = np.mgrid[max(py - half, 0):min(py + half + 1, h), max(px - half, 0):min(px + half + 1, w)]
    ok = m.valid[ys, xs]
    if ok.sum() < 9:
        return None, np.inf
    dx = (xs[ok] - px).astype(np.float64)
    dy = (ys[ok] - py).astype(np.float64)
    a = np.stack([np.ones_like(dx), dx, dy, dx * dx, dx * dy, dy * dy], axis=1)
    vals = m.coords[ys[ok], xs[ok]]
    coef, *_ = np.linalg.lstsq(a, vals, rcond=None)
    sigma = float(np.sqrt(np.mean((a @ coef - vals) ** 2)))
    q = np.zeros(2)
    for _ in range(20):
        f = coef[0] + coef[1] * q[0] + coef[2] * q[1] + coef[3] * q[0] ** 2 + coef[4] * q[0] * q[1] + coef[5] * q[1] ** 2
        jac = np.stack([coef[1] + 2 * coef[3] * q[0] + coef[4] * q[1],
                        coef[2] + coef[4] * q[0] + 2 * coef[5] * q[1]], axis=1)
        step, *_ = np.linalg.lstsq(jac, key - f, rcond=None)
        q += step
        if np.max(np.abs(step)) < 1e-12:
            break
    if not np.all(np.isfinite(q)) or np.max(np.abs(q)) > 1.5:
        return None, sigma
    return np.array([px, py]) + q, sigma


def refine(m: UVWMap, key: np.ndarray, start, radius: int, tol: float, stencils: _Stencils | None = None):
    """Sub-pixel location of ``key`` in a full-resolution map near pixel ``start``.

    Returns None when the key cannot be reproduced locally to within
    ``max(tol, 3 * fit noise)``, which is what occluded points look like.
    """
    h, w = m.valid.shape
    sx, sy = int(start[0]), int(start[1])
    y0, y1 = max(sy - radius, 0), min(sy + radius + 1, h)
    x0, x1 = max(sx - radius, 0), min(sx + radius + 1, w)
    win = m.valid[y0:y1, x0:x1]
    if not win.any():
        return None
    d = np.where(win, np.max(np.abs(m.coords[y0:y1, x0:x1] - key), axis=2), np.inf)
    iy, ix = np.unravel_index(int(np.argmin(d)), d.shape)
    px, py = x0 + ix, y0 + iy
    if d[iy, ix] == 0.0:
        return np.array([px, py], dtype=np.float64)

    st = stencils or _Stencils(m)
    by0, by1 = max(py - 3, 0), min(py + 3, h - 1)
    bx0, bx1 = max(px - 3, 0), min(px + 3, w - 1)
    ok = st.ok[by0:by1, bx0:bx1]
    best, sigma = None, np.inf
    if ok.any():
        bys, bxs = np.nonzero(ok)
        bys, bxs = bys + by0, bxs + bx0
        gx, gy = st.gx[bys, bxs], st.gy[bys, bxs]
        r = key - st.a[bys, bxs]
        # 2x2 normal equations per block
        sxx, sxy, syy = (gx * gx).sum(1), (gx * gy).sum(1), (gy * gy).sum(1)
        bx_, by_ = (gx * r).sum(1), (gy * r).sum(1)
        det = sxx * syy - sxy * sxy
        gmin = np.sqrt(np.minimum(sxx, syy))
        flat = (det > 1e-12 * np.maximum(sxx * syy, 1e-300)) & (st.res[bys, bxs] <= 1e-2 * gmin)
        if flat.any():
            with np.errstate(divide="ignore", invalid="ignore"):
                ux = (syy * bx_ - sxy * by_) / det
                uy = (sxx * by_ - sxy * bx_) / det
            outside = (np.maximum(0, np.maximum(-ux, ux - 1)) + np.maximum(0, np.maximum(-uy, uy - 1)))
            rel = st.res[bys, bxs] / np.where(gmin > 0, gmin, np.inf)
            cand = np.nonzero(flat & np.isfinite(outside))[0]
            if len(cand):
                k = cand[np.lexsort((rel[cand], outside[cand]))[0]]
                if outside[k] <= 1.0:
                    best = np.array([bxs[k] + ux[k], bys[k] + uy[k]])
                    sigma = float(st.res[bys[k], bxs[k]])
    if best is None:
        best, sigma = _quadratic(m, key, px, py)
        if best is None:
            return None
    val = _bilinear(m, best[0], best[1])
    if val is None:
        val = m.coords[int(round(best[1])), int(round(best[0]))]
    if np.max(np.abs(val - key)) > max(tol, 3.0 * sigma):
        return None
    return best


def build_tracks(maps: list, cfg: StereoConfig = StereoConfig(), stats: dict | None = None) -> list:
    """Grow multi-view tracks from the valid downsampled samples of the first map.

    ``stats``, if given, receives the seed count and the number of tracks
    before and after validation.
    """
    if len(maps) < 2:
        raise ValueError("need at least two views")
    small = [downsample(m, cfg.downsample_factor) for m in maps]
    ref = small[0]
    ys, xs = np.nonzero(ref.valid)
    keys = ref.coords[ys, xs]
    seeds = ref.centers[ys, xs]
    radius = int(math.ceil(cfg.downsample_factor))
    refine_on = cfg.subpixel_tol is not None
    stencils = [_Stencils(m) if refine_on else None for m in maps]

    matches = []
    for v in range(1, len(maps)):
        sv = small[v]
        vy, vx = np.nonzero(sv.valid)
        if len(vx) == 0:
            matches.append(None)
            continue
        k, _ = nearest_brute(keys, sv.coords[vy, vx])
        matches.append((sv.centers[vy[k], vx[k]], sv.coords[vy[k], vx[k]]))

    tracks = []
    built = 0
    for s in range(len(keys)):
        key = keys[s]
        views, pixels = [0], [seeds[s].astype(np.float64)]
        for v in range(1, len(maps)):
            if matches[v - 1] is None:
                continue
            center, value = matches[v - 1][0][s], matches[v - 1][1][s]
            if np.max(np.abs(value - key)) > cfg.uvw_tol:
                continue
            pix = center.astype(np.float64)
            if refine_on:
                pix = refine(maps[v], key, center, radius, cfg.subpixel_tol, stencils[v])
                if pix is None:
                    continue
            views.append(v)
            pixels.append(pix)
        if len(views) < cfg.min_track_len:
            continue
        built += 1
        # validation at the looser tolerance on the final observations
        good_v, good_p = [], []
        for v, p in zip(views, pixels):
            val = _bilinear(maps[v], p[0], p[1])
            if val is None:
                val = maps[v].coords[int(round(p[1])), int(round(p[0]))]
            if np.max(np.abs(val - key)) <= cfg.track_tol:
                good_v.append(v)
                good_p.append(p)
        if len(good_v) >= cfg.min_track_len and good_v[0] == 0:
            tracks.append(MultiViewTrack(key.copy(), good_v, good_p, s))
    if stats is not None:
        stats.update(seeds=len(keys), tracks_built=built, tracks_validated=len(tracks))
    return tracks


def triangulate_dlt(observations, cameras) -> np.ndarray:
    """Linear triangulation from ``[(view, (x, y)), ...]`` or a :class:`MultiViewTrack`."""
    if isinstance(observations, MultiViewTrack):
        observations = list(zip(observations.views, observations.pixels))
    if len(observations) < 2:
        raise ValueError("triangulation needs at least two observations")
    rows = []
    for v, (x, y) in observations:
        p = cameras[v].projection if isinstance(cameras[v], Camera) else np.asarray(cameras[v])
        for r in (x * p[2] - p[0], y * p[2] - p[1]):
            rows.append(r / np.linalg.norm(r))
    a = np.array(rows)
    _, s, vt = np.linalg.svd(a)
    if s[-2] <= 1e-9 * s[0]:
        raise DegenerateTriangulation("rays are parallel or the system is rank deficient")
    X = vt[-1]
    if abs(X[3]) < 1e-12:
        raise PointAtInfinity("triangulated point lies at infinity")
    return X[:3] / X[3]


def reprojection_errors(point, observations, cameras) -> np.ndarray:
    errs = []
    for v, pix in observations:
        xy, _ = cameras[v].project(point[None, :])
        errs.append(float(np.linalg.norm(xy[0] - np.asarray(pix))))
    return np.array(errs)


@dataclass
class Reconstruction:
    points: np.ndarray
    colors: np.ndarray
    tracks: list
    stats: dict = field(default_factory=dict)

    def save(self, ply_path, stats_path=None) -> None:
        write_ply(ply_path, self.points, self.colors)
        if stats_path is not None:
            with open(stats_path, "w") as fh:
                for k, v in self.stats.items():
                    fh.write(f"{k} {v}\n")


def reconstruct(maps: list, cameras: list, cfg: StereoConfig = StereoConfig(), images=None) -> Reconstruction:
    """Tracks, DLT, and the reprojection gate; per-track failures are logged and skipped."""
    if len(maps) != len(cameras):
        raise ValueError("need one camera per map")
    stats = {}
    tracks = build_tracks(maps, cfg, stats)
    pts, cols, kept = [], [], []
    failed = behind = 0
    for tr in tracks:
        obs = list(zip(tr.views, tr.pixels))
        try:
            X = triangulate_dlt(obs, cameras)
        except DegenerateTriangulation as exc:
            log.debug("track %d skipped: %s", tr.seed, exc)
            failed += 1
            continue
        if np.max(reprojection_errors(X, obs, cameras)) > cfg.reproj_thresh_px:
            continue
        if any(cameras[v].to_camera(X[None, :])[0, 2] <= 0 for v in tr.views):
            behind += 1
            log.warning("track %d triangulates behind a camera", tr.seed)
        pts.append(X)
        kept.append(tr)
        if images is not None:
            cols.append(np.mean([images[v][int(round(p[1])), int(round(p[0]))] for v, p in obs], axis=0))
        else:
            cols.append(tr.key)
    stats.update(triangulated=len(tracks) - failed, filtered=len(pts), behind_camera=behind)
    return Reconstruction(np.array(pts).reshape(-1, 3), np.array(cols).reshape(-1, 3), kept, stats)
