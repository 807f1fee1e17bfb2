"""Latent feature grid over the canonical unit cube.

The grid stores ``raw`` features of shape ``(N, N, N, D)`` indexed ``[x, y, z]``
and a Gaussian-smoothed copy that all queries read from. Cube coordinates map
onto voxel coordinates with ``c * (N - 1)`` (corners aligned), so a query at a
cube corner returns the corner voxel exactly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .io import FormatError

GRID_MAGIC = b"DMGRID01"

# offsets of the 8 cell corners, in the order used by corner_grads
CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
     [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
    dtype=np.int64,
)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled 1D Gaussian truncated at ``ceil(3 sigma)`` and normalized to sum 1."""
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def filter_matrix(n: int, sigma: float) -> np.ndarray:
    """Dense ``n x n`` matrix of the 1D filter with clamp-to-edge boundaries.

    Row ``i`` holds the weights that output sample ``i`` takes from each input
    sample; taps falling outside ``[0, n)`` are folded onto the edge sample.
    """
    kern = gaussian_kernel(sigma)
    radius = len(kern) // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for k, w in enumerate(kern):
            j = min(max(i + k - radius, 0), n - 1)
            mat[i, j] += w
    return mat


def _apply_separable(arr: np.ndarray, mat: np.ndarray) -> np.ndarray:
    # arr: (N, N, N, D); contract the filter along each spatial axis in turn
    out = arr
    for axis in range(3):
        moved = np.moveaxis(out, axis, 0)
        shape = moved.shape
        moved = (mat @ moved.reshape(shape[0], -1)).reshape(shape)
        out = np.moveaxis(moved, 0, axis)
    return np.ascontiguousarray(out)


def gaussian_filter_3d(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of an ``(N, N, N, D)`` array, per channel."""
    if sigma == 0:
        return arr.copy()
    return _apply_separable(arr, filter_matrix(arr.shape[0], sigma))


def gaussian_filter_3d_transpose(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Adjoint of :func:`gaussian_filter_3d`; maps gradients on the smoothed grid to raw."""
    if sigma == 0:
        return arr.copy()
    return _apply_separable(arr, filter_matrix(arr.shape[0], sigma).T)


@dataclass
class LatentGrid:
    raw: np.ndarray
    sigma: float = 1.0
    smoothed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim != 4 or not (raw.shape[0] == raw.shape[1] == raw.shape[2]):
            raise ValueError(f"raw must have shape (N, N, N, D), got {raw.shape}")
        if raw.shape[0] < 2 or raw.shape[3] < 1:
            raise ValueError(f"need N >= 2 and D >= 1, got {raw.shape}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        self.raw = raw
        self.refresh()

    @property
    def resolution(self) -> int:
        return self.raw.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.raw.shape[3]

    def refresh(self):
        """Recompute ``smoothed`` from ``raw``; call after every raw update."""
        if not np.all(np.isfinite(self.raw)):
            raise FloatingPointError("latent grid contains non-finite values")
        self.smoothed = gaussian_filter_3d(self.raw, self.sigma)

    def copy(self) -> "LatentGrid":
        return LatentGrid(self.raw.copy(), self.sigma)


def new_grid(resolution: int = 32, feature_dim: int = 16, sigma: float = 1.0,
             seed: int = 0) -> LatentGrid:
    """Grid with raw features drawn i.i.d. from N(0, 1)."""
    if int(resolution) != resolution or resolution < 2:
        raise ValueError(f"resolution must be an integer >= 2, got {resolution}")
    if int(feature_dim) != feature_dim or feature_dim < 1:
        raise ValueError(f"feature_dim must be a positive integer, got {feature_dim}")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((resolution, resolution, resolution, feature_dim))
    return LatentGrid(raw, float(sigma))


def smooth(grid: LatentGrid) -> LatentGrid:
    """Return a grid whose smoothed view is freshly recomputed from raw."""
    return LatentGrid(grid.raw, grid.sigma)


def _cell_and_weights(n: int, points: np.ndarray):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (P, 3), got {pts.shape}")
    if np.any(~np.isfinite(pts)) or np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("query points must lie inside the unit cube")
    vox = pts * (n - 1)
    base = np.minimum(np.floor(vox).astype(np.int64), n - 2)
    frac = vox - base
    return base, frac


def _corner_weights(frac: np.ndarray) -> np.ndarray:
    # (P, 8) trilinear weights in CORNERS order
    f = frac[:, None, :]
    sel = CORNERS[None, :, :]
    return np.prod(np.where(sel == 1, f, 1.0 - f), axis=2)


def trilinear_weights(grid: LatentGrid, points: np.ndarray):
    """Corner voxel indices ``(P, 8, 3)`` and weights ``(P, 8)`` for each point."""
    base, frac = _cell_and_weights(grid.resolution, points)
    idx = base[:, None, :] + CORNERS[None, :, :]
    return idx, _corner_weights(frac)


def query_points(grid: LatentGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear lookup of ``(P, 3)`` cube points into the smoothed grid, returns ``(P, D)``."""
    idx, w = trilinear_weights(grid, points)
    corners = grid.smoothed[idx[..., 0], idx[..., 1], idx[..., 2]]  # (P, 8, D)
    return np.einsum("pc,pcd->pd", w, corners)


def query(grid: LatentGrid, p) -> np.ndarray:
    return query_points(grid, np.asarray(p, dtype=np.float64)[None, :])[0]


def query_points_grad(grid: LatentGrid, points: np.ndarray, upstream: np.ndarray):
    """Backward pass of :func:`query_points`.

    Returns ``(point_grad (P, 3), corner_idx (P, 8, 3), corner_grads (P, 8, D))``
    where ``corner_grads[p, c] = w[p, c] * upstream[p]`` is the gradient on the
    smoothed-grid entry ``corner_idx[p, c]``.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    n = grid.resolution
    base, frac = _cell_and_weights(n, points)
    idx = base[:, None, :] + CORNERS[None, :, :]
    w = _corner_weights(frac)
    corners = grid.smoothed[idx[..., 0], idx[..., 1], idx[..., 2]]
    proj = np.einsum("pcd,pd->pc", corners, upstream)  # upstream . corner feature

    point_grad = np.empty_like(frac)
    for axis in range(3):
        # d w / d frac_axis: sign flip on the axis factor, other two factors kept
        others = [a for a in range(3) if a != axis]
        sel = CORNERS[None, :, :]
        f = frac[:, None, :]
        other_w = np.prod(
            np.where(sel[..., others] == 1, f[..., others], 1.0 - f[..., others]), axis=2)
        dw = np.where(CORNERS[None, :, axis] == 1, other_w, -other_w)
        point_grad[:, axis] = np.sum(dw * proj, axis=1) * (n - 1)

    corner_grads = w[:, :, None] * upstream[:, None, :]
    return point_grad, idx, corner_grads


def query_grad(grid: LatentGrid, p, upstream):
    pg, idx, cg = query_points_grad(grid, np.asarray(p, dtype=np.float64)[None, :],
                                    np.asarray(upstream, dtype=np.float64)[None, :])
    return pg[0], list(zip(map(tuple, idx[0]), cg[0]))


def scatter_corner_grads(grid: LatentGrid, idx: np.ndarray, corner_grads: np.ndarray) -> np.ndarray:
    """Accumulate sparse corner gradients into a dense smoothed-grid gradient."""
    n = grid.resolution
    dense = np.zeros_like(grid.smoothed)
    flat = (idx[..., 0] * n + idx[..., 1]) * n + idx[..., 2]
    np.add.at(dense.reshape(n ** 3, -1), flat.reshape(-1), corner_grads.reshape(-1, grid.feature_dim))
    return dense


def raw_gradient(grid: LatentGrid, smoothed_grad: np.ndarray) -> np.ndarray:
    """Push a gradient w.r.t. the smoothed grid back through the filter onto raw."""
    return gaussian_filter_3d_transpose(smoothed_grad, grid.sigma)


def grid_to_bytes(grid: LatentGrid) -> bytes:
    n, d = grid.resolution, grid.feature_dim
    header = GRID_MAGIC + struct.pack("<IId", n, d, float(grid.sigma))
    # x fastest: memory order [channel][z][y][x]
    body = np.ascontiguousarray(grid.raw.transpose(3, 2, 1, 0)).astype("<f4").tobytes()
    return header + body


def grid_from_bytes(data: bytes, path="<grid>", offset: int = 0) -> tuple:
    """Parse one grid block starting at ``offset``; returns ``(grid, end offset)``."""
    if data[offset:offset + 8] != GRID_MAGIC:
        raise FormatError(path, offset, "bad magic, expected DMGRID01")
    if len(data) < offset + 24:
        raise FormatError(path, len(data), "truncated header")
    n, d, sigma = struct.unpack_from("<IId", data, offset + 8)
    end = offset + 24 + 4 * n ** 3 * d
    if len(data) < end:
        raise FormatError(path, len(data), f"truncated payload: expected {end - offset} bytes of grid")
    vals = np.frombuffer(data, dtype="<f4", count=n ** 3 * d, offset=offset + 24).astype(np.float64)
    raw = vals.reshape(d, n, n, n).transpose(3, 2, 1, 0)
    return LatentGrid(np.ascontiguousarray(raw), sigma), end


def save_grid(grid: LatentGrid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_to_bytes(grid))


def load_grid(path) -> LatentGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    grid, end = grid_from_bytes(data, path)
    if end != len(data):
        raise FormatError(path, end, f"payload size mismatch: {len(data) - end} trailing bytes")
    return grid
