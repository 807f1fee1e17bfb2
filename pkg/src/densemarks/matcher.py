"""Correspondence tools over embedding maps.

Nearest-neighbor search always returns the lowest linear source index among
equidistant candidates. The binned search reproduces the brute-force result
bit for bit: both paths compute squared distances with the same expression.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import UVWMap


@dataclass
class CorrespondenceField:
    source_xy: np.ndarray  # (H, W, 2) int source pixel (x, y) per target pixel, -1 where invalid
    distance: np.ndarray  # (H, W) embedding distance, nan where invalid

    @property
    def valid(self) -> np.ndarray:
        return self.source_xy[..., 0] >= 0


@dataclass
class Ball:
    center: np.ndarray
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.sum((pts - self.center) ** 2, axis=-1) <= self.radius ** 2


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (n, C) x (m, C) -> (n, m); elementwise differences so both search paths agree exactly
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("nmc,nmc->nm", diff, diff)


def nearest_brute(queries: np.ndarray, points: np.ndarray, chunk: int = 512):
    """Exhaustive nearest neighbor; returns ``(index, squared distance)`` per query."""
    idx = np.empty(len(queries), dtype=np.int64)
    d2 = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        d = _sqdist(queries[s:s + chunk], points)
        k = np.argmin(d, axis=1)
        idx[s:s + chunk] = k
        d2[s:s + chunk] = d[np.arange(len(k)), k]
    return idx, d2


class BinnedIndex:
    """Uniform 3D binning of points with exact ring-expansion queries."""

    def __init__(self, points: np.ndarray, bins: int | None = None):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("binned search works on 3D points")
        n = len(self.points)
        self.bins = bins or max(1, int(round((n / 4.0) ** (1 / 3))))
        self.lo = self.points.min(axis=0)
        span = self.points.max(axis=0) - self.lo
        self.width = max(float(span.max()), 1e-12) / self.bins
        cell = self._cell(self.points)
        key = self._key(cell)
        order = np.lexsort((np.arange(n), key))  # stable: ascending index inside each bin
        self.order = order
        self.keys_sorted = key[order]
        uniq, start = np.unique(self.keys_sorted, return_index=True)
        self.bin_start = dict(zip(uniq.tolist(), start.tolist()))
        self.bin_end = dict(zip(uniq.tolist(), np.append(start[1:], n).tolist()))

    def _cell(self, pts):
        return np.clip(np.floor((pts - self.lo) / self.width).astype(np.int64), 0, self.bins - 1)

    def _key(self, cell):
        return (cell[..., 0] * self.bins + cell[..., 1]) * self.bins + cell[..., 2]

    def _ring_members(self, cell, r):
        b = self.bins
        rng = np.arange(-r, r + 1)
        off = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
        off = off[np.abs(off).max(axis=1) == r]
        cells = cell + off
        ok = np.all((cells >= 0) & (cells < b), axis=1)
        out = []
        for k in self._key(cells[ok]).tolist():
            if k in self.bin_start:
                out.append(self.order[self.bin_start[k]:self.bin_end[k]])
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def query(self, queries: np.ndarray):
        q = np.asarray(queries, dtype=np.float64)
        idx = np.full(len(q), -1, dtype=np.int64)
        d2 = np.full(len(q), np.inf)
        qcell = self._cell(q)
        qkey = self._key(qcell)
        last = self.bins - 1
        for key in np.unique(qkey).tolist():
            members = np.nonzero(qkey == key)[0]
            cell = qcell[members[0]]
            cand = np.zeros(0, dtype=np.int64)
            pending = members
            r = 0
            while len(pending):
                cand = np.sort(np.concatenate([cand, self._ring_members(cell, r)]))
                if len(cand):
                    d = _sqdist(q[pending], self.points[cand])
                    k = np.argmin(d, axis=1)
                    idx[pending] = cand[k]
                    d2[pending] = d[np.arange(len(k)), k]
                # unexamined cells lie beyond the faces of the (2r+1)^3 block
                lower = self.lo + (cell - r) * self.width
                upper = self.lo + (cell + r + 1) * self.width
                gaps = np.hstack([
                    np.where(cell - r - 1 >= 0, q[pending] - lower, np.inf),
                    np.where(cell + r + 1 <= last, upper - q[pending], np.inf),
                ])
                bound = gaps.min(axis=1)
                done = np.isinf(bound) | (d2[pending] < bound ** 2)
                pending = pending[~done]
                r += 1
        return idx, d2


def nearest(queries: np.ndarray, points: np.ndarray, method: str = "auto"):
    """``method`` is ``"brute"``, ``"binned"`` or ``"auto"`` (binned only for large 3D problems)."""
    small = len(queries) * len(points) < 50_000_000
    if method == "brute" or (method == "auto" and (points.shape[1] != 3 or small)):
        return nearest_brute(queries, points)
    return BinnedIndex(points).query(queries)


def nn_warp(source: UVWMap, source_rgb: np.ndarray, target: UVWMap, method: str = "auto"):
    """Copy source colors onto target pixels by target-to-source nearest embedding."""
    spx, semb = source.valid_pixels()
    if len(spx) == 0:
        raise ValueError("source map has no valid pixels")
    tpx, temb = target.valid_pixels()
    h, w = target.valid.shape
    src_xy = np.full((h, w, 2), -1, dtype=np.int64)
    dist = np.full((h, w), np.nan)
    warped = np.zeros((h, w, 3))
    if len(tpx):
        k, d2 = nearest(temb, semb, method)
        src_xy[tpx[:, 1], tpx[:, 0]] = spx[k]
        dist[tpx[:, 1], tpx[:, 0]] = np.sqrt(d2)
        warped[tpx[:, 1], tpx[:, 0]] = source_rgb[spx[k, 1], spx[k, 0]]
    return warped, CorrespondenceField(src_xy, dist)


def query_point(samples) -> np.ndarray:
    """Average the embeddings found at annotated pixels ``[(map, (x, y)), ...]``."""
    if not samples:
        raise ValueError("need at least one annotated pixel")
    vals = []
    for m, (x, y) in samples:
        if not m.valid[y, x]:
            raise ValueError(f"annotated pixel ({x}, {y}) is not valid in its map")
        vals.append(m.coords[y, x])
    return np.clip(np.mean(vals, axis=0), 0.0, 1.0)


def find_point(m: UVWMap, ref) -> tuple:
    """Valid pixel whose embedding is closest to ``ref``; returns ``((x, y), distance)``."""
    px, emb = m.valid_pixels()
    if len(px) == 0:
        raise ValueError("map has no valid pixels")
    k, d2 = nearest_brute(np.asarray(ref, dtype=np.float64)[None, :], emb)
    return (int(px[k[0], 0]), int(px[k[0], 1])), float(np.sqrt(d2[0]))


def region_select(m: UVWMap, region) -> np.ndarray:
    return m.valid & region.contains(m.coords)


def region_from_votes(clusters, percentile: float = 90.0) -> Ball:
    """Bounding ball of per-image annotated embedding clusters."""
    pts = np.vstack([np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in clusters])
    if len(pts) == 0:
        raise ValueError("no votes")
    center = pts.mean(axis=0)
    radius = float(np.percentile(np.linalg.norm(pts - center, axis=1), percentile))
    return Ball(center, radius)


def match_metrics(pred: CorrespondenceField, target_px: np.ndarray, source_px: np.ndarray):
    """Mean and RMS pixel error of predicted matches against ground-truth pairs.

    ``target_px[p]`` is a target pixel and ``source_px[p]`` its true source
    location; the error is the distance from the predicted source match.
    """
    t = np.asarray(target_px, dtype=np.int64)
    s = np.asarray(source_px, dtype=np.float64)
    if len(t) == 0:
        return float("nan"), float("nan")
    got = pred.source_xy[t[:, 1], t[:, 0]].astype(np.float64)
    if np.any(got < 0):
        raise ValueError("ground-truth target pixel has no predicted match")
    err = np.linalg.norm(got - s, axis=1)
    return float(err.mean()), float(np.sqrt(np.mean(err ** 2)))


def cycle_consistency(fwd: CorrespondenceField, bwd: CorrespondenceField, radius: float = 1.0) -> float:
    """Fraction of target pixels whose match maps back within ``radius`` pixels."""
    ys, xs = np.nonzero(fwd.valid)
    if len(xs) == 0:
        return float("nan")
    src = fwd.source_xy[ys, xs]
    back = bwd.source_xy[src[:, 1], src[:, 0]]
    ok = back[:, 0] >= 0
    err = np.linalg.norm(back - np.stack([xs, ys], axis=1), axis=1)
    return float(np.mean(ok & (err <= radius)))
