"""Procedural talking-head sequences with exact correspondence ground truth.

A single head template (an ellipsoid with ear and nose bumps) is animated with
smooth rigid motion plus a jaw-like deformation and rasterized. Every pixel
carries the canonical coordinate of the surface point it sees, which gives
exact tracks, landmarks and region labels for free.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Camera, UVWMap, euler_yxz
from .io import FormatError, read_pgm, read_ppm, read_uvw, write_pgm, write_ppm, write_uvw, parse_floats
from .raster import Fragments, interpolate, rasterize

NUM_REGIONS = 6
REGION_NAMES = ("skin", "hair", "left_ear", "right_ear", "nose", "neck")
SKIN, HAIR, LEFT_EAR, RIGHT_EAR, NOSE, NECK = range(NUM_REGIONS)
NUM_LANDMARKS = 70
MIN_TRACKS = 80
MAX_TRACKS = 400

_RADII = np.array([0.85, 1.05, 0.95])
_EAR_DIR = np.array([1.0, 0.08, 0.1])
_NOSE_DIR = np.array([0.0, 0.12, -1.0])
_EAR_RADIUS = 0.1  # canonical units
_NOSE_RADIUS = 0.09
# fixed color mixing; invertible so color identifies the canonical point
_TEXTURE_MIX = np.array([[1.0, 0.55, -0.35], [-0.45, 1.0, 0.5], [0.4, -0.5, 1.0]])


class GenerationError(RuntimeError):
    pass


class TrackRejection(ValueError):
    """Too few co-visible tracks between two frames."""


def _direction(theta, phi):
    return np.stack([np.sin(theta) * np.sin(phi), -np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=-1)


def _bump(dirs, center, amp, width):
    c = center / np.linalg.norm(center)
    return amp * np.exp(-np.sum((dirs - c) ** 2, axis=-1) / (2 * width ** 2))


@dataclass
class HeadTemplate:
    vertices: np.ndarray  # (V, 3) rest positions
    faces: np.ndarray  # (F, 3)
    canon: np.ndarray  # (V, 3) canonical coordinates in [0, 1]^3
    labels: np.ndarray  # (V,) region index
    landmarks: np.ndarray  # (70,) vertex indices
    ear_centers: np.ndarray = field(default=None)  # (2, 3) canonical, left then right
    nose_center: np.ndarray = field(default=None)

    @property
    def anchors(self) -> np.ndarray:
        """Canonical landmark anchors ``(70, 3)``."""
        return self.canon[self.landmarks]

    def region_ball(self, region: int):
        """Canonical ball ``(center, radius)`` that defines an ear or nose region."""
        if region == LEFT_EAR:
            return self.ear_centers[0], _EAR_RADIUS
        if region == RIGHT_EAR:
            return self.ear_centers[1], _EAR_RADIUS
        if region == NOSE:
            return self.nose_center, _NOSE_RADIUS
        raise ValueError(f"region {region} is not ball-shaped")


def make_template(n_lat: int = 40, n_lon: int = 64) -> HeadTemplate:
    theta = np.pi * np.arange(1, n_lat) / n_lat
    phi = 2 * np.pi * np.arange(n_lon) / n_lon
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.concatenate([
        _direction(np.array([0.0]), np.array([0.0])),
        _direction(tt, pp).reshape(-1, 3),
        _direction(np.array([np.pi]), np.array([0.0])),
    ])
    ear_l, ear_r = _EAR_DIR, _EAR_DIR * np.array([-1.0, 1.0, 1.0])
    r = 1.0 + _bump(dirs, ear_l, 0.28, 0.13) + _bump(dirs, ear_r, 0.28, 0.13) + _bump(dirs, _NOSE_DIR, 0.25, 0.14)
    verts = dirs * r[:, None] * _RADII

    faces = []
    ring = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    last = len(dirs) - 1
    for j in range(n_lon):
        faces.append((0, ring(0, j + 1), ring(0, j)))
        faces.append((last, ring(n_lat - 2, j), ring(n_lat - 2, j + 1)))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    faces = np.array(faces, dtype=np.int64)

    lo, hi = verts.min(axis=0), verts.max(axis=0)
    canon = 0.05 + 0.9 * (verts - lo) / (hi - lo)

    def nearest(direction):
        return int(np.argmax(dirs @ (direction / np.linalg.norm(direction))))

    ear_centers = np.stack([canon[nearest(ear_l)], canon[nearest(ear_r)]])
    nose_center = canon[nearest(_NOSE_DIR)]

    labels = np.full(len(verts), SKIN, dtype=np.uint8)
    labels[(dirs[:, 1] < -0.35) | ((dirs[:, 2] > 0.3) & (dirs[:, 1] < 0.3))] = HAIR
    labels[dirs[:, 1] > 0.75] = NECK
    labels[np.linalg.norm(canon - nose_center, axis=1) <= _NOSE_RADIUS] = NOSE
    labels[np.linalg.norm(canon - ear_centers[0], axis=1) <= _EAR_RADIUS] = LEFT_EAR
    labels[np.linalg.norm(canon - ear_centers[1], axis=1) <= _EAR_RADIUS] = RIGHT_EAR

    # landmarks: farthest-point sampling over the frontal face, seeded at the nose tip
    cand = np.nonzero((dirs[:, 2] < -0.55) & np.isin(labels, (SKIN, NOSE)))[0]
    chosen = [int(cand[np.argmin(np.linalg.norm(verts[cand] - verts[nearest(_NOSE_DIR)], axis=1))])]
    dist = np.linalg.norm(verts[cand] - verts[chosen[0]], axis=1)
    while len(chosen) < NUM_LANDMARKS:
        k = int(np.argmax(dist))
        chosen.append(int(cand[k]))
        dist = np.minimum(dist, np.linalg.norm(verts[cand] - verts[cand[k]], axis=1))
    return HeadTemplate(verts, faces, canon, labels, np.array(chosen, dtype=np.int64),
                        ear_centers, nose_center)


def texture(uvw: np.ndarray) -> np.ndarray:
    """Smooth procedural albedo as a function of canonical coordinates."""
    mixed = (np.asarray(uvw) - 0.5) @ _TEXTURE_MIX.T
    return 0.5 + 0.42 * np.tanh(1.8 * mixed)


def default_camera(size: int = 64, distance: float = 5.0) -> Camera:
    return Camera.look_at((0.0, 0.0, -distance), (0.0, 0.0, 0.0), focal=1.6 * size, size=size)


@dataclass
class Pose:
    """Rigid placement of the template: ``x_world = scale * rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    expression: float = 0.0


def deform(template: HeadTemplate, expression: float, shape: np.ndarray | None = None) -> np.ndarray:
    """Template vertices after the jaw deformation and per-identity axis scaling."""
    v = template.vertices
    if shape is not None:
        v = v * shape
    if expression == 0.0:
        return v.copy()
    w = np.clip((v[:, 1] - 0.1) / 0.6, 0.0, 1.0) * np.clip((0.3 - v[:, 2]) / 0.6, 0.0, 1.0)
    disp = np.stack([np.zeros_like(w), 0.15 * w, -0.05 * w], axis=1)
    return v + expression * disp


def posed_vertices(template: HeadTemplate, pose: Pose, shape: np.ndarray | None = None) -> np.ndarray:
    local = deform(template, pose.expression, shape)
    return pose.scale * local @ np.asarray(pose.rotation).T + pose.translation


@dataclass
class Render:
    frags: Fragments
    uvw: UVWMap
    labels: np.ndarray
    image: np.ndarray


def render(template: HeadTemplate, vertices: np.ndarray, camera: Camera) -> Render:
    xy, z = camera.project(vertices)
    frags = rasterize(xy, z, template.faces, camera.width, camera.height)
    mask = frags.mask
    coords = np.clip(interpolate(frags, template.faces, template.canon), 0.0, 1.0)
    labels = np.zeros(mask.shape, dtype=np.uint8)
    tri = template.faces[frags.face[mask]]
    dominant = tri[np.arange(len(tri)), np.argmax(frags.bary[mask], axis=1)]
    labels[mask] = template.labels[dominant]
    image = np.zeros(mask.shape + (3,))
    image[mask] = np.round(texture(coords[mask]) * 255.0) / 255.0
    return Render(frags, UVWMap(coords, mask), labels, image)


def render_uvw(template: HeadTemplate, pose: Pose, camera: Camera, shape=None) -> UVWMap:
    """Z-buffered canonical-coordinate map of the posed template."""
    return render(template, posed_vertices(template, pose, shape), camera).uvw


@dataclass
class TrackPairs:
    pixels_a: np.ndarray  # (P, 2) int (x, y)
    pixels_b: np.ndarray
    ids: np.ndarray  # (P,)

    def __len__(self):
        return len(self.pixels_a)

    def swapped(self) -> "TrackPairs":
        return TrackPairs(self.pixels_b, self.pixels_a, self.ids)


@dataclass
class MotionAmplitude:
    yaw: float = 0.6  # radians
    pitch: float = 0.2
    roll: float = 0.08
    translation: float = 0.08
    expression: float = 1.0

    @classmethod
    def zero(cls) -> "MotionAmplitude":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class Sequence:
    images: np.ndarray  # (F, H, W, 3) floats on the 1/255 lattice
    masks: np.ndarray  # (F, H, W) bool
    uvw: np.ndarray  # (F, H, W, 3)
    labels: np.ndarray  # (F, H, W) uint8
    landmarks: np.ndarray  # (F, 70, 2) pixel (x, y)
    landmark_visible: np.ndarray  # (F, 70) bool
    camera: Camera
    tracks: dict = field(default_factory=dict)  # (i, j) with i < j -> TrackPairs
    poses: list = field(default_factory=list)
    # geometry, absent for sequences loaded from disk
    template: HeadTemplate | None = None
    shape: np.ndarray | None = None
    vertices: np.ndarray | None = None  # (F, V, 3) world
    face_ids: np.ndarray | None = None  # (F, H, W)
    bary: np.ndarray | None = None  # (F, H, W, 3)
    depth: np.ndarray | None = None  # (F, H, W)

    @property
    def num_frames(self) -> int:
        return len(self.images)

    @property
    def size(self):
        return self.images.shape[1:3]

    def uvw_map(self, t: int) -> UVWMap:
        return UVWMap(self.uvw[t], self.masks[t])

    def pair_tracks(self, i: int, j: int) -> TrackPairs:
        if i < j:
            return self.tracks[(i, j)]
        return self.tracks[(j, i)].swapped()


def _landmark_visibility(template, verts, camera, rend: Render, tol_uvw: float):
    pts, z = camera.project(verts[template.landmarks])
    px = np.round(pts).astype(np.int64)
    h, w = rend.uvw.valid.shape
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    vis = np.zeros(len(pts), dtype=bool)
    idx = np.nonzero(inside)[0]
    xs, ys = px[idx, 0], px[idx, 1]
    ok = rend.uvw.valid[ys, xs]
    ok &= np.abs(rend.frags.depth[ys, xs] - z[idx]) < 0.05
    ok &= np.max(np.abs(rend.uvw.coords[ys, xs] - template.anchors[idx]), axis=1) <= tol_uvw
    vis[idx] = ok
    return pts, vis


def build_sequence(template: HeadTemplate, poses: list, camera: Camera, shape=None,
                   track_budget: int = 256, track_seed: int = 0, with_tracks: bool = True) -> Sequence:
    """Render a sequence from explicit per-frame poses."""
    renders, verts = [], []
    for pose in poses:
        v = posed_vertices(template, pose, shape)
        rend = render(template, v, camera)
        if not rend.uvw.valid.any():
            raise GenerationError("template is entirely outside the camera frustum")
        renders.append(rend)
        verts.append(v)
    tol = 2.0 / max(camera.width, camera.height)
    lms, vis = zip(*(_landmark_visibility(template, v, camera, r, tol) for v, r in zip(verts, renders)))
    seq = Sequence(
        images=np.stack([r.image for r in renders]),
        masks=np.stack([r.uvw.valid for r in renders]),
        uvw=np.stack([r.uvw.coords for r in renders]),
        labels=np.stack([r.labels for r in renders]),
        landmarks=np.stack(lms),
        landmark_visible=np.stack(vis),
        camera=camera,
        poses=list(poses),
        template=template,
        shape=shape,
        vertices=np.stack(verts),
        face_ids=np.stack([r.frags.face for r in renders]),
        bary=np.stack([r.frags.bary for r in renders]),
        depth=np.stack([r.frags.depth for r in renders]),
    )
    if with_tracks:
        rng = np.random.default_rng(track_seed)
        for i in range(seq.num_frames):
            for j in range(i + 1, seq.num_frames):
                try:
                    seq.tracks[(i, j)] = sample_track_pairs(seq, i, j, track_budget, int(rng.integers(2 ** 31)))
                except TrackRejection:
                    pass
    return seq


def generate_sequence(seed: int, frames: int = 12, size: int = 64, camera: Camera | None = None,
                      amplitude: MotionAmplitude | None = None, track_budget: int = 256,
                      template: HeadTemplate | None = None) -> Sequence:
    """Animate the template with sinusoidal head motion and render every frame."""
    if frames < 2:
        raise ValueError("a sequence needs at least 2 frames")
    if size < 32:
        raise ValueError("image size must be at least 32")
    amp = amplitude if amplitude is not None else MotionAmplitude()
    cam = camera if camera is not None else default_camera(size)
    tpl = template if template is not None else make_template()
    rng = np.random.default_rng(seed)
    shape = 1.0 + rng.uniform(-0.05, 0.05, 3)
    scale = 1.0 + rng.uniform(-0.05, 0.05)
    ph = rng.uniform(0, 2 * np.pi, 7)
    speed = rng.uniform(0.6, 1.2)
    track_seed = int(rng.integers(2 ** 31))
    poses = []
    for t in range(frames):
        w = 2 * np.pi * speed * t / frames
        rot = euler_yxz(amp.yaw * np.sin(w + ph[0]), amp.pitch * np.sin(0.7 * w + ph[1]),
                        amp.roll * np.sin(1.3 * w + ph[2]))
        trans = amp.translation * np.array([np.sin(w + ph[3]), np.sin(0.8 * w + ph[4]), 0.5 * np.sin(w + ph[5])])
        expr = amp.expression * 0.5 * (1.0 - np.cos(1.5 * w + ph[6]))
        poses.append(Pose(rot, trans, scale, float(expr)))
    return build_sequence(tpl, poses, cam, shape, track_budget, track_seed)


def _surface_in_frame(seq: Sequence, i: int, j: int, pixels: np.ndarray):
    """World positions in frame ``j`` of the surface points seen at ``pixels`` of frame ``i``."""
    xs, ys = pixels[:, 0], pixels[:, 1]
    tri = seq.template.faces[seq.face_ids[i][ys, xs]]
    bary = seq.bary[i][ys, xs]
    return np.einsum("pk,pkc->pc", bary, seq.vertices[j][tri]), tri, bary


def sample_track_pairs(seq: Sequence, i: int, j: int, budget: int = 256, seed: int = 0) -> TrackPairs:
    """Ground-truth correspondences from frame ``i`` to frame ``j``.

    Foreground pixels of frame ``i`` are sampled uniformly, carried to frame
    ``j`` through the known deformation and kept when they pass the z-buffer
    test there. Pairs whose integer endpoints disagree in canonical
    coordinates by more than two pixels' worth (grazing surface) are dropped.
    """
    if i == j:
        raise ValueError("track pairs need two distinct frames")
    if seq.template is None:
        raise ValueError("sequence has no geometry; tracks must be loaded from disk")
    budget = min(int(budget), MAX_TRACKS)
    ys, xs = np.nonzero(seq.masks[i])
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(xs), size=min(budget, len(xs)), replace=False))
    pa = np.stack([xs[pick], ys[pick]], axis=1)
    world, _, _ = _surface_in_frame(seq, i, j, pa)
    xy, z = seq.camera.project(world)
    pb = np.round(xy).astype(np.int64)
    h, w = seq.masks[j].shape
    keep = (pb[:, 0] >= 0) & (pb[:, 0] < w) & (pb[:, 1] >= 0) & (pb[:, 1] < h)
    pb_c = np.clip(pb, 0, [w - 1, h - 1])
    bx, by = pb_c[:, 0], pb_c[:, 1]
    keep &= seq.masks[j][by, bx]
    keep &= np.abs(z - seq.depth[j][by, bx]) < 0.05
    tol = 2.0 / max(h, w)
    diff = np.max(np.abs(seq.uvw[i][pa[:, 1], pa[:, 0]] - seq.uvw[j][by, bx]), axis=1)
    keep &= diff <= tol
    if keep.sum() < MIN_TRACKS:
        raise TrackRejection(f"only {int(keep.sum())} co-visible tracks between frames {i} and {j}")
    return TrackPairs(pa[keep], pb[keep], pick[keep])


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AffineParams:
    """``p' = scale * Rot(angle) (p - c) + c + shift`` about the image center ``c``."""

    shift: tuple = (0.0, 0.0)
    scale: float = 1.0
    angle: float = 0.0  # radians
    center: tuple = (0.0, 0.0)

    @property
    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def forward(self, points: np.ndarray) -> np.ndarray:
        ctr = np.asarray(self.center)
        return (np.asarray(points, dtype=np.float64) - ctr) @ self.matrix.T + ctr + np.asarray(self.shift)

    def inverse(self, points: np.ndarray) -> np.ndarray:
        ctr = np.asarray(self.center)
        return (np.asarray(points, dtype=np.float64) - ctr - np.asarray(self.shift)) @ np.linalg.inv(self.matrix).T + ctr

    @property
    def is_identity(self) -> bool:
        return self.shift == (0.0, 0.0) and self.scale == 1.0 and self.angle == 0.0


def draw_augmentation(rng: np.random.Generator, width: int, height: int, prob: float = 0.5,
                      max_shift: float = 0.1, max_scale: float = 0.1,
                      max_angle: float = np.deg2rad(18.0)) -> AffineParams:
    """Random shift, scale and rotation, each applied independently with ``prob``."""
    u = rng.uniform(size=7)
    shift, scale, angle = (0.0, 0.0), 1.0, 0.0
    if u[0] < prob:
        shift = (float((2 * u[1] - 1) * max_shift * width), float((2 * u[2] - 1) * max_shift * height))
    if u[3] < prob:
        scale = float(1.0 + (2 * u[4] - 1) * max_scale)
    if u[5] < prob:
        angle = float((2 * u[6] - 1) * max_angle)
    return AffineParams(shift, scale, angle, ((width - 1) / 2.0, (height - 1) / 2.0))


@dataclass
class FrameBundle:
    image: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool
    labels: np.ndarray | None = None
    uvw: UVWMap | None = None
    landmarks: np.ndarray | None = None  # (K, 2)
    landmark_visible: np.ndarray | None = None
    points: np.ndarray | None = None  # (P, 2) track endpoints
    point_visible: np.ndarray | None = None


def _in_frame(points, width, height):
    r = np.round(points)
    return (r[:, 0] >= 0) & (r[:, 0] <= width - 1) & (r[:, 1] >= 0) & (r[:, 1] <= height - 1)


def augment(bundle: FrameBundle, params: AffineParams) -> FrameBundle:
    """Apply one affine map consistently to every layer of a frame bundle."""
    if params.is_identity:
        return bundle
    h, w = bundle.mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src = params.inverse(np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64))
    coords = np.stack([src[:, 1], src[:, 0]])  # (row, col) for ndimage

    def lin(a):
        return ndimage.map_coordinates(a, coords, order=1, mode="constant", cval=0.0).reshape(h, w)

    def near(a):
        return ndimage.map_coordinates(a, coords, order=0, mode="constant", cval=0).reshape(h, w)

    out = FrameBundle(
        image=np.stack([lin(bundle.image[..., c]) for c in range(bundle.image.shape[2])], axis=-1),
        mask=near(bundle.mask.astype(np.uint8)).astype(bool),
    )
    if bundle.labels is not None:
        out.labels = near(bundle.labels)
    if bundle.uvw is not None:
        cover = lin(bundle.uvw.valid.astype(np.float64))
        ok = cover > 1.0 - 1e-9
        vals = np.stack([lin(bundle.uvw.coords[..., c]) for c in range(bundle.uvw.coords.shape[2])], axis=-1)
        out.uvw = UVWMap(np.where(ok[..., None], vals, 0.0), ok)
    if bundle.landmarks is not None:
        out.landmarks = params.forward(bundle.landmarks)
        vis = _in_frame(out.landmarks, w, h)
        out.landmark_visible = vis if bundle.landmark_visible is None else vis & bundle.landmark_visible
    if bundle.points is not None:
        out.points = params.forward(bundle.points)
        vis = _in_frame(out.points, w, h)
        out.point_visible = vis if bundle.point_visible is None else vis & bundle.point_visible
    return out


# ---------------------------------------------------------------------------
# directory format


def save_sequence(seq: Sequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(seq.num_frames):
        write_ppm(d / f"frame_{t:04d}.ppm", seq.images[t])
        write_pgm(d / f"mask_{t:04d}.pgm", seq.masks[t].astype(np.uint8) * 255)
        write_uvw(d / f"uvw_{t:04d}.dmv", seq.uvw[t], seq.masks[t])
        write_pgm(d / f"labels_{t:04d}.pgm", seq.labels[t])
    lines = []
    for t in range(seq.num_frames):
        for k, (p, v) in enumerate(zip(seq.landmarks[t], seq.landmark_visible[t])):
            lines.append(f"{k} {p[0]:.6f} {p[1]:.6f}" if v else f"{k} -1 -1")
    (d / "landmarks.txt").write_text("\n".join(lines) + "\n")
    for (i, j), tr in sorted(seq.tracks.items()):
        rows = np.hstack([tr.pixels_a, tr.pixels_b])
        (d / f"tracks_{i}_{j}.txt").write_text("".join(f"{a} {b} {c} {e}\n" for a, b, c, e in rows))
    seq.camera.save(d / "camera.txt")


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {d}")
    frames = sorted(d.glob("frame_*.ppm"))
    if not frames:
        raise FileNotFoundError(f"no frames in {d}")
    images, masks, uvws, labels = [], [], [], []
    for t in range(len(frames)):
        images.append(read_ppm(d / f"frame_{t:04d}.ppm").astype(np.float64) / 255.0)
        masks.append(read_pgm(d / f"mask_{t:04d}.pgm") > 0)
        coords, _ = read_uvw(d / f"uvw_{t:04d}.dmv")
        uvws.append(coords)
        labels.append(read_pgm(d / f"labels_{t:04d}.pgm"))
    n = len(frames)
    lm_path = d / "landmarks.txt"
    lm = parse_floats(lm_path, lm_path.read_text(), expected=n * NUM_LANDMARKS * 3).reshape(n, NUM_LANDMARKS, 3)
    vis = lm[..., 1] >= 0
    tracks = {}
    for path in sorted(d.glob("tracks_*_*.txt")):
        i, j = (int(x) for x in path.stem.split("_")[1:])
        text = path.read_text()
        vals = parse_floats(path, text)
        if len(vals) % 4:
            raise FormatError(path, len(text.encode()), "track lines must have 4 fields")
        rows = vals.reshape(-1, 4).astype(np.int64)
        tracks[(i, j)] = TrackPairs(rows[:, :2], rows[:, 2:], np.arange(len(rows)))
    return Sequence(
        images=np.stack(images), masks=np.stack(masks), uvw=np.stack(uvws), labels=np.stack(labels),
        landmarks=lm[..., 1:], landmark_visible=vis, camera=Camera.load(d / "camera.txt"), tracks=tracks,
    )
