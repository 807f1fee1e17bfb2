import numpy as np
import pytest

from densemarks import pose as P
from densemarks import synthetic as S
from densemarks.geometry import axis_angle_to_matrix, euler_yxz, geodesic_angle, matrix_to_axis_angle


@pytest.fixture(scope="module")
def scene(template):
    cam = S.default_camera(64)
    gt = P.RigidPose(matrix_to_axis_angle(euler_yxz(0.2, 0.1, 0.0)), [0.02, -0.03, 0.1], 0.0)
    return cam, gt, S.render_uvw(template, gt.to_pose(), cam)


def perturbed(gt, yaw_deg=15.0, dt=(0.05, 0.0, 0.0)):
    rot = euler_yxz(np.radians(yaw_deg), 0, 0) @ gt.matrix
    return P.RigidPose(matrix_to_axis_angle(rot), gt.translation + np.asarray(dt), gt.log_scale)


def test_ground_truth_residual(template, scene):
    cam, gt, obs = scene
    r = P.residuals(gt, template, cam, obs)
    assert len(r) == 3 * obs.valid.sum()
    assert np.linalg.norm(r) < 1e-6


def test_offscreen_gives_empty_residual(template, scene):
    cam, gt, obs = scene
    far = P.RigidPose(gt.rotation, [40.0, 0.0, 0.0], 0.0)
    assert P.residuals(far, template, cam, obs).size == 0


def test_residual_grows_with_perturbation(template, scene):
    cam, gt, obs = scene
    norms = [np.linalg.norm(P.residuals(perturbed(gt, a, (0, 0, 0)), template, cam, obs))
             for a in np.linspace(0.0, 5.0, 6)]
    assert norms[0] < 1e-6
    assert all(b > a for a, b in zip(norms, norms[1:]))


def test_huber_is_identity_below_delta(rng):
    r = rng.uniform(-0.049, 0.049, 200)
    np.testing.assert_array_equal(P.huber(r), r)
    big = np.array([0.2, -1.0])
    # squared output equals twice the Huber cost
    np.testing.assert_allclose(P.huber(big) ** 2, 2 * 0.05 * np.abs(big) - 0.05 ** 2)
    assert np.all(np.sign(P.huber(big)) == np.sign(big))


def test_small_perturbation_residual_is_plain_difference(template, scene):
    cam, gt, obs = scene
    pose = perturbed(gt, 0.2, (0.001, 0.0, 0.0))
    rend = S.render_uvw(template, pose.to_pose(), cam)
    both = rend.valid & obs.valid
    diff = (rend.coords[both] - obs.coords[both]).ravel()
    small = np.abs(diff) < P.HUBER_DELTA
    got = P.residuals(pose, template, cam, obs)
    np.testing.assert_array_equal(got[small], diff[small])


def test_init_at_ground_truth_returns_immediately(template, scene):
    cam, gt, obs = scene
    res = P.fit_pose(template, cam, obs, gt)
    assert res.iterations == 0 and res.cost < 1e-12
    np.testing.assert_array_equal(res.pose.vector(), gt.vector())


def test_recovers_perturbed_pose(template, scene):
    cam, gt, obs = scene
    res = P.fit_pose(template, cam, obs, perturbed(gt), iters=50)
    assert np.degrees(geodesic_angle(res.pose.matrix, gt.matrix)) < 0.5
    assert np.max(np.abs(res.pose.translation - gt.translation)) < 1e-3
    trace = np.array(res.trace)
    assert np.all(np.diff(trace) <= 0)
    assert trace[-1] < trace[0]


def test_fit_rejects_bad_input(template, scene):
    cam, gt, obs = scene
    with pytest.raises(ValueError):
        P.fit_pose(template, cam, obs, gt, iters=0)
    with pytest.raises(P.InitializationError):
        P.fit_pose(template, cam, obs, P.RigidPose(gt.rotation, [40.0, 0, 0], 0.0))


def test_world_gauge(template, scene, rng):
    cam, gt, obs = scene
    pose = perturbed(gt, 3.0, (0.01, -0.02, 0.0))
    base = P.residuals(pose, template, cam, obs)
    for _ in range(3):
        rot = axis_angle_to_matrix(rng.normal(0, 0.3, 3))
        t = rng.normal(0, 0.5, 3)
        pose2, cam2 = P.compose_world(rot, t, pose, cam)
        # observed map is a picture, it does not move with the world frame
        moved = P.residuals(pose2, template, cam2, obs)
        assert moved.shape == base.shape
        assert np.max(np.abs(moved - base)) < 1e-9


def test_scale_depth_gauge(template, scene):
    cam, gt, obs = scene
    pose = perturbed(gt, 2.0)
    base = P.residuals(pose, template, cam, obs)
    other = P.residuals(P.along_gauge(pose, cam, 0.05), template, cam, obs)
    assert other.shape == base.shape
    assert np.max(np.abs(other - base)) < 1e-9


def test_pose_vector_roundtrip(rng):
    for _ in range(20):
        v = np.concatenate([rng.normal(0, 1, 3), rng.normal(0, 1, 3), [rng.normal()]])
        p = P.RigidPose.from_vector(v)
        assert np.linalg.norm(p.rotation) < np.pi
        np.testing.assert_allclose(p.matrix, axis_angle_to_matrix(v[:3]), atol=1e-12)
        assert p.scale == pytest.approx(np.exp(v[6]))
    fields = P.RigidPose(np.zeros(3), np.ones(3), 0.5).to_text(0.25, 7).split()
    assert len(fields) == 9 and fields[-1] == "7" and float(fields[-2]) == 0.25
