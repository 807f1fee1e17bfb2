"""Cameras, rotations and the per-pixel canonical-coordinate map type."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import FormatError, parse_floats


def axis_angle_to_matrix(rotvec) -> np.ndarray:
    """Rodrigues' formula."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-15:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def matrix_to_axis_angle(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    s = np.linalg.norm(w) / 2.0
    c = (np.trace(rot) - 1.0) / 2.0
    theta = np.arctan2(s, c)
    if theta < 1e-15:
        return w / 2.0
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        m = (rot + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = m[:, i] / np.sqrt(max(m[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * theta
    return w / (2.0 * s) * theta


def euler_yxz(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Head rotation: yaw about y, then pitch about x, then roll about z (radians)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return rz @ rx @ ry


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Rotation angle of ``r1^T r2`` in radians."""
    cos = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass
class Camera:
    """Pinhole camera; ``x_cam = rotation @ x_world + translation``.

    Pixel centers sit at integer image coordinates, ``x`` to the right and
    ``y`` down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("camera rotation must have determinant +1")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def projection(self) -> np.ndarray:
        """3x4 matrix ``K [R | t]``."""
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """World points ``(N, 3)`` to pixel coordinates ``(N, 2)`` and depths ``(N,)``."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy], axis=1)
        return xy, z

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0), *, focal: float, size: int) -> "Camera":
        """Camera at ``eye`` looking at ``target``; ``up`` points to image-top."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        down = -np.asarray(up, dtype=np.float64)
        right = np.cross(down, fwd)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        c = (size - 1) / 2.0
        return cls(focal, focal, c, c, rot, -rot @ eye, size, size)

    def to_text(self) -> str:
        vals = list(self.rotation.reshape(-1)) + list(self.translation) + \
            [self.fx, self.fy, self.cx, self.cy, self.width, self.height]
        rows = [vals[0:3], vals[3:6], vals[6:9], vals[9:12], vals[12:16], vals[16:18]]
        return "\n".join(" ".join(repr(float(v)) for v in row) for row in rows) + "\n"

    @classmethod
    def from_text(cls, text: str, path="<camera>") -> "Camera":
        vals = parse_floats(path, text, expected=18)
        try:
            return cls(vals[12], vals[13], vals[14], vals[15], vals[:9], vals[9:12],
                       int(vals[16]), int(vals[17]))
        except ValueError as exc:
            raise FormatError(path, 0, str(exc)) from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_text(Path(path).read_text(), path)


@dataclass
class UVWMap:
    """Per-pixel canonical coordinates ``coords (H, W, 3)`` with a validity mask.

    Values at invalid pixels are meaningless and ignored everywhere.
    """

    coords: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.coords.shape[:2] != self.valid.shape or self.coords.ndim != 3:
            raise ValueError("coords must be (H, W, C) matching valid (H, W)")

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    def valid_pixels(self):
        """Valid pixel coordinates ``(N, 2)`` as (x, y) in row-major order, and their values."""
        ys, xs = np.nonzero(self.valid)
        return np.stack([xs, ys], axis=1), self.coords[ys, xs]

    @classmethod
    def empty(cls, height: int, width: int, channels: int = 3) -> "UVWMap":
        return cls(np.zeros((height, width, channels)), np.zeros((height, width), dtype=bool))
