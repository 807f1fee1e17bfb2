"""Rigid pose fitting against a canonical-coordinate map.

The template is rendered at a candidate pose and compared per pixel with an
observed UVW map. Residuals pass through a Huber transform and the 7 pose
parameters are refined by damped Gauss-Newton on a finite-difference Jacobian.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, UVWMap, axis_angle_to_matrix, matrix_to_axis_angle
from .synthetic import HeadTemplate, Pose, render_uvw

HUBER_DELTA = 0.05
FD_STEP = 1e-4


class InitializationError(ValueError):
    pass


@dataclass
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # axis-angle, radians
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    log_scale: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.log_scale = float(self.log_scale)

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    @property
    def matrix(self) -> np.ndarray:
        return axis_angle_to_matrix(self.rotation)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation, [self.log_scale]])

    @classmethod
    def from_vector(cls, v) -> "RigidPose":
        v = np.asarray(v, dtype=np.float64)
        rot = v[:3]
        if np.linalg.norm(rot) >= np.pi:
            # re-chart so the angle stays below pi
            rot = matrix_to_axis_angle(axis_angle_to_matrix(rot))
        return cls(rot, v[3:6], v[6])

    @classmethod
    def from_pose(cls, pose: Pose) -> "RigidPose":
        return cls(matrix_to_axis_angle(np.asarray(pose.rotation)), pose.translation, np.log(pose.scale))

    def to_pose(self) -> Pose:
        return Pose(self.matrix, self.translation.copy(), self.scale)

    def to_text(self, cost: float, iters: int) -> str:
        vals = " ".join(repr(float(x)) for x in self.vector())
        return f"{vals} {cost!r} {iters}"


def huber(r: np.ndarray, delta: float = HUBER_DELTA) -> np.ndarray:
    """Map residuals so that their squares give the Huber cost (times two)."""
    a = np.abs(r)
    out = np.array(r, dtype=np.float64, copy=True)
    big = a >= delta
    out[big] = np.sign(r[big]) * np.sqrt(2.0 * delta * a[big] - delta * delta)
    return out


def _dense_residuals(pose: RigidPose, template: HeadTemplate, camera: Camera, observed: UVWMap,
                     delta: float) -> tuple:
    rendered = render_uvw(template, pose.to_pose(), camera)
    both = rendered.valid & observed.valid
    r = np.zeros(observed.coords.shape)
    r[both] = huber(rendered.coords[both] - observed.coords[both], delta)
    return r.ravel(), both


def residuals(pose: RigidPose, template: HeadTemplate, camera: Camera, observed: UVWMap,
              delta: float = HUBER_DELTA) -> np.ndarray:
    """Huber-transformed ``rendered - observed`` over pixels valid in both maps, row-major."""
    if not observed.valid.any():
        raise ValueError("observed map has no valid pixels")
    rendered = render_uvw(template, pose.to_pose(), camera)
    both = rendered.valid & observed.valid
    return huber(rendered.coords[both] - observed.coords[both], delta).ravel()


def along_gauge(pose: RigidPose, camera: Camera, log_k: float) -> RigidPose:
    """The pose scaled by ``exp(log_k)`` about the camera center: same image."""
    c = camera.center
    return RigidPose(pose.rotation, np.exp(log_k) * (pose.translation - c) + c, pose.log_scale + log_k)


@dataclass
class FitResult:
    pose: RigidPose
    cost: float
    trace: list  # cost at the start and after every iteration
    iterations: int
    accepted: list  # per iteration: whether a step was taken


def fit_pose(template: HeadTemplate, camera: Camera, observed: UVWMap, init: RigidPose, iters: int = 50,
             delta: float = HUBER_DELTA, lam: float = 1e-3, rtol: float = 1e-8, max_tries: int = 12) -> FitResult:
    """Levenberg-damped Gauss-Newton over rotation, translation and log-scale.

    From a single view, scaling the head about the camera center leaves the
    image unchanged, so log-scale is observable only together with depth.
    Steps are taken in rotation and translation, which span every direction
    the image can see; log-scale keeps its initial value. Without this the
    finite-difference noise lets the fit drift along the unobservable one.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    x = init.vector()
    r, both = _dense_residuals(init, template, camera, observed, delta)
    if not both.any():
        raise InitializationError("rendered template does not overlap the observed map")
    cost = 0.5 * float(r @ r)
    trace, accepted = [cost], []
    it = 0
    for it in range(1, iters + 1):
        if cost == 0.0:
            it -= 1
            break
        jac = np.empty((len(r), 6))
        for k in range(6):
            e = np.zeros(7)
            e[k] = FD_STEP
            rp, _ = _dense_residuals(RigidPose.from_vector(x + e), template, camera, observed, delta)
            rm, _ = _dense_residuals(RigidPose.from_vector(x - e), template, camera, observed, delta)
            jac[:, k] = (rp - rm) / (2 * FD_STEP)
        jtj, jtr = jac.T @ jac, jac.T @ r
        took = False
        for _ in range(max_tries):
            step = np.append(np.linalg.solve(jtj + lam * np.eye(6), -jtr), 0.0)
            cand = RigidPose.from_vector(x + step)
            rc, bc = _dense_residuals(cand, template, camera, observed, delta)
            cc = 0.5 * float(rc @ rc)
            if bc.any() and cc < cost:
                lam *= 0.1
                took = True
                break
            lam *= 10.0
        accepted.append(took)
        if not took:
            trace.append(cost)
            break
        rel = (cost - cc) / max(cost, 1e-300)
        x, r, cost = cand.vector(), rc, cc
        trace.append(cost)
        if rel < rtol:
            break
    return FitResult(RigidPose.from_vector(x), cost, trace, it, accepted)


def compose_world(transform_rot: np.ndarray, transform_t: np.ndarray, pose: RigidPose, camera: Camera):
    """Apply a world-frame rigid transform to a pose and undo it in the camera."""
    rt, tt = np.asarray(transform_rot), np.asarray(transform_t)
    new_pose = RigidPose(matrix_to_axis_angle(rt @ pose.matrix), rt @ pose.translation + tt, pose.log_scale)
    rot = camera.rotation @ rt.T
    cam = Camera(camera.fx, camera.fy, camera.cx, camera.cy, rot, camera.translation - rot @ tt,
                 camera.width, camera.height)
    return new_pose, cam
