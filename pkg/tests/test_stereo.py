import numpy as np
import pytest

from densemarks import stereo as st
from densemarks import synthetic as S
from densemarks.geometry import Camera, UVWMap, axis_angle_to_matrix

RIG_SIZE = 256
BASELINE = 1.5


def back_project(cam, depth, pixel):
    """World point seen at an integer pixel, from the rendered depth buffer."""
    x, y = pixel
    z = depth[int(y), int(x)]
    pc = np.array([(x - cam.cx) / cam.fx * z, (y - cam.cy) / cam.fy * z, z])
    return cam.rotation.T @ (pc - cam.translation)


@pytest.fixture(scope="module")
def rig(template):
    verts = S.posed_vertices(template, S.Pose(np.eye(3), np.zeros(3)))
    eyes = [(-BASELINE, 0, -5), (BASELINE, 0, -5), (0, -BASELINE, -5)]
    cams = [Camera.look_at(e, (0, 0, 0), focal=1.6 * RIG_SIZE, size=RIG_SIZE) for e in eyes]
    rends = [S.render(template, verts, c) for c in cams]
    return cams, rends


@pytest.fixture(scope="module")
def two_view(rig):
    cams, rends = rig
    return st.reconstruct([r.uvw for r in rends[:2]], cams[:2])


@pytest.fixture(scope="module")
def noisy_maps(rig):
    _, rends = rig
    rng = np.random.default_rng(0)
    out = []
    for r in rends[:2]:
        m = r.uvw
        noise = rng.uniform(-0.02, 0.02, m.coords.shape)
        out.append(UVWMap(np.where(m.valid[..., None], m.coords + noise, 0.0), m.valid))
    return out


def surface_errors(rec, cam, depth):
    return np.array([np.linalg.norm(X - back_project(cam, depth, tr.pixels[0]))
                     for tr, X in zip(rec.tracks, rec.points)])


def random_cameras(rng, n, size=64):
    cams = []
    for _ in range(n):
        d = rng.standard_normal(3)
        d[2] = -abs(d[2]) - 1.0
        eye = 6.0 * d / np.linalg.norm(d)
        cams.append(Camera.look_at(eye, rng.uniform(-0.2, 0.2, 3), focal=rng.uniform(50, 120), size=size))
    return cams


def test_config_defaults():
    c = st.StereoConfig()
    assert (c.downsample_factor, c.min_track_len, c.uvw_tol, c.track_tol, c.reproj_thresh_px) == \
        (4.0, 2, 0.05, 0.10, 10.0)


@pytest.mark.parametrize("kw", [dict(downsample_factor=0.5), dict(min_track_len=1),
                                dict(uvw_tol=0.2, track_tol=0.1), dict(reproj_thresh_px=-1.0),
                                dict(subpixel_tol=0.0)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        st.StereoConfig(**kw)


def test_downsample_block_validity():
    valid = np.ones((8, 8), dtype=bool)
    valid[1, 6] = False
    d = st.downsample(UVWMap(np.zeros((8, 8, 3)), valid), 4.0)
    assert d.valid.shape == (2, 2)
    np.testing.assert_array_equal(d.valid, [[True, False], [True, True]])


def test_identical_maps_give_identical_tracks(rig):
    _, rends = rig
    m = rends[0].uvw
    stats = {}
    tracks = st.build_tracks([m, m], st.StereoConfig(), stats)
    assert len(tracks) == stats["seeds"] > 0
    for tr in tracks:
        assert tr.views == [0, 1]
        np.testing.assert_array_equal(tr.pixels[0], tr.pixels[1])


def test_offset_map_gives_no_tracks():
    # u spans less than the offset, so no value of the shifted map comes back within tolerance
    ys, xs = np.mgrid[0:32, 0:32] / 31.0
    m = UVWMap(np.stack([0.4 + 0.1 * xs, 0.2 + 0.6 * ys, np.full_like(xs, 0.5)], axis=-1),
               np.ones((32, 32), dtype=bool))
    shifted = UVWMap(m.coords + np.array([0.2, 0.0, 0.0]), m.valid)
    assert len(st.build_tracks([m, m])) == 64
    assert st.build_tracks([m, shifted]) == []


def test_needs_two_maps(rig):
    with pytest.raises(ValueError):
        st.build_tracks([rig[1][0].uvw])


def test_tracks_respect_tolerance(rig):
    _, rends = rig
    maps = [r.uvw for r in rends]
    for tr in st.build_tracks(maps, st.StereoConfig(subpixel_tol=None)):
        assert len(tr) >= 2
        for v, (x, y) in zip(tr.views, tr.pixels):
            val = maps[v].coords[int(y), int(x)]
            assert np.max(np.abs(val - tr.key)) <= 0.10


def test_symmetric_origin():
    cams = [Camera.look_at((s, 0, -5), (0, 0, 0), focal=100, size=65) for s in (-1.0, 1.0)]
    obs = [(v, cams[v].project(np.zeros((1, 3)))[0][0]) for v in range(2)]
    assert np.max(np.abs(st.triangulate_dlt(obs, cams))) < 1e-9


def test_random_points_exact_recovery():
    rng = np.random.default_rng(5)
    cams = random_cameras(rng, 3)
    pts = rng.uniform(-1, 1, (50, 3))
    worst = 0.0
    for X in pts:
        obs = [(v, c.project(X[None])[0][0]) for v, c in enumerate(cams)]
        worst = max(worst, np.linalg.norm(st.triangulate_dlt(obs, cams) - X))
    assert worst < 1e-6


def test_zero_baseline_is_degenerate():
    cam = Camera.look_at((0, 0, -5), (0, 0, 0), focal=100, size=64)
    xy = cam.project(np.array([[0.1, 0.2, 0.3]]))[0][0]
    with pytest.raises(st.DegenerateTriangulation):
        st.triangulate_dlt([(0, xy), (1, xy)], [cam, cam])


def test_point_at_infinity():
    p = np.hstack([np.eye(3), np.zeros((3, 1))])
    q = np.hstack([np.eye(3), np.array([[1.0], [0.0], [0.0]])])
    # parallel rays toward direction (0, 0, 1), seen at the same pixel in both views
    with pytest.raises(st.DegenerateTriangulation):
        st.triangulate_dlt([(0, (0.0, 0.0)), (1, (0.0, 0.0))], [p, q])


def test_projective_scale_invariance():
    rng = np.random.default_rng(8)
    cams = random_cameras(rng, 3)
    X = rng.uniform(-1, 1, 3)
    obs = [(v, c.project(X[None])[0][0] + rng.normal(0, 0.5, 2)) for v, c in enumerate(cams)]
    base = st.triangulate_dlt(obs, cams)
    scaled = [c.projection * s for c, s in zip(cams, (0.01, 7.0, 300.0))]
    assert np.linalg.norm(st.triangulate_dlt(obs, scaled) - base) < 1e-9


def test_third_view_changes_little():
    rng = np.random.default_rng(9)
    cams = random_cameras(rng, 3)
    for X in rng.uniform(-1, 1, (10, 3)):
        obs = [(v, c.project(X[None])[0][0]) for v, c in enumerate(cams)]
        a = st.triangulate_dlt(obs[:2], cams)
        b = st.triangulate_dlt(obs, cams)
        assert np.linalg.norm(a - b) < 1e-8


def test_two_view_rig_accuracy(rig, two_view):
    cams, rends = rig
    err = surface_errors(two_view, cams[0], rends[0].frags.depth)
    assert len(err) > 500
    assert np.mean(err < 1e-3) >= 0.95


def test_two_view_rig_within_1e5(rig, two_view):
    """Every surviving point within 1e-5 of the true surface."""
    cams, rends = rig
    err = surface_errors(two_view, cams[0], rends[0].frags.depth)
    assert np.max(err) < 1e-5


def test_filter_soundness(rig, two_view, noisy_maps):
    cams, _ = rig
    for rec in (two_view, st.reconstruct(noisy_maps, cams[:2])):
        for tr, X in zip(rec.tracks, rec.points):
            obs = list(zip(tr.views, tr.pixels))
            assert np.max(st.reprojection_errors(X, obs, cams)) <= 10.0


def test_tight_gate_is_respected(rig, noisy_maps):
    cams, _ = rig
    rec = st.reconstruct(noisy_maps, cams[:2], st.StereoConfig(reproj_thresh_px=0.5))
    for tr, X in zip(rec.tracks, rec.points):
        assert np.max(st.reprojection_errors(X, list(zip(tr.views, tr.pixels)), cams)) <= 0.5


def test_noise_reduces_survivors(rig, two_view, noisy_maps):
    cams, _ = rig
    noisy = st.reconstruct(noisy_maps, cams[:2])
    assert 0 < len(noisy.points) < len(two_view.points)


def test_zero_threshold_empties_noisy_cloud(rig, noisy_maps):
    cams, _ = rig
    rec = st.reconstruct(noisy_maps, cams[:2], st.StereoConfig(reproj_thresh_px=0.0))
    assert len(rec.points) == 0


def test_three_view_coverage(rig):
    cams, rends = rig
    maps = [r.uvw for r in rends]
    small = st.downsample(maps[0], 4.0)
    ys, xs = np.nonzero(small.valid)
    covisible = []
    for x, y in small.centers[ys, xs]:
        X = back_project(cams[0], rends[0].frags.depth, (x, y))
        ok = True
        for v in (1, 2):
            xy, z = cams[v].project(X[None])
            ix, iy = np.round(xy[0]).astype(int)
            ok &= (0 <= ix < RIG_SIZE and 0 <= iy < RIG_SIZE
                   and abs(rends[v].frags.depth[iy, ix] - z[0]) < 0.01)
        covisible.append(ok)
    covisible = np.nonzero(covisible)[0]
    three = {tr.seed for tr in st.build_tracks(maps) if len(tr) == 3}
    assert len(covisible) > 100
    assert np.mean([s in three for s in covisible]) >= 0.8


def test_three_view_cloud_is_denser(rig, two_view):
    cams, rends = rig
    rec = st.reconstruct([r.uvw for r in rends], cams)
    assert len(rec.points) >= len(two_view.points)
    err = surface_errors(rec, cams[0], rends[0].frags.depth)
    assert np.mean(err < 1e-3) >= 0.95


def test_reconstruction_is_deterministic(rig, two_view, tmp_path):
    cams, rends = rig
    again = st.reconstruct([r.uvw for r in rends[:2]], cams[:2])
    np.testing.assert_array_equal(again.points, two_view.points)
    two_view.save(tmp_path / "a.ply", tmp_path / "a.txt")
    again.save(tmp_path / "b.ply", tmp_path / "b.txt")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    stats = dict(line.split() for line in (tmp_path / "a.txt").read_text().splitlines())
    assert int(stats["filtered"]) == len(two_view.points)
    assert int(stats["tracks_built"]) >= int(stats["tracks_validated"]) >= int(stats["filtered"])


def test_colors_from_images(rig):
    cams, rends = rig
    maps = [r.uvw for r in rends[:2]]
    rec = st.reconstruct(maps, cams[:2], images=[r.image for r in rends[:2]])
    tr = rec.tracks[0]
    want = np.mean([rends[v].image[int(round(p[1])), int(round(p[0]))] for v, p in zip(tr.views, tr.pixels)],
                   axis=0)
    np.testing.assert_allclose(rec.colors[0], want)


def test_rotated_rig_still_works(template):
    """The pipeline does not depend on the head sitting at identity."""
    pose = S.Pose(axis_angle_to_matrix([0.0, 0.4, 0.0]), np.array([0.05, 0.0, 0.1]))
    verts = S.posed_vertices(template, pose)
    cams = [Camera.look_at((s, 0, -5), (0, 0, 0), focal=1.6 * 128, size=128) for s in (-BASELINE, BASELINE)]
    rends = [S.render(template, verts, c) for c in cams]
    rec = st.reconstruct([r.uvw for r in rends], cams)
    err = surface_errors(rec, cams[0], rends[0].frags.depth)
    assert len(err) > 50 and np.median(err) < 1e-3
