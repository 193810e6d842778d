import math

import numpy as np
import pytest

from featuncert.errors import (
    BehindCameraError,
    DomainError,
    EpipolarDegenerateError,
    InputError,
    TriangulationDegenerateError,
)
from featuncert.geometry import (
    CameraModel,
    ImuSample,
    ImuState,
    Pose,
    RelativePose,
    backproject,
    closest_point_on_line,
    epipolar_line,
    integrate_imu,
    pose_from_quaternion,
    project,
    quaternion_from_rotation,
    relative_pose,
    reproject_with_depth,
    rotation_exp,
    triangulate,
)
from conftest import make_pose


class TestProjection:
    def test_principal_point(self, camera):
        assert np.allclose(project(camera, [0, 0, 2]), [50, 50])

    def test_hand_pinhole_arithmetic(self, camera):
        # fx*x/z + cx = 100*1/2 + 50
        assert np.allclose(project(camera, [1, 0, 2]), [100, 50])

    def test_behind_camera(self, camera):
        with pytest.raises(DomainError):
            project(camera, [0, 0, -1])

    def test_backproject_principal_ray(self, camera):
        assert np.allclose(backproject(camera, [50, 50], 3.0), [0, 0, 3])

    def test_backproject_zero_depth(self, camera):
        with pytest.raises(DomainError):
            backproject(camera, [50, 50], 0.0)

    def test_round_trip_identity(self, camera):
        rng = np.random.default_rng(11)
        for _ in range(50):
            pixel = rng.uniform(0, 100, size=2)
            depth = rng.uniform(0.1, 50)
            again = project(camera, backproject(camera, pixel, depth))
            assert np.abs(again - pixel).max() < 1e-9

    def test_invalid_camera(self):
        with pytest.raises(InputError):
            CameraModel(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(InputError):
            CameraModel(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


class TestRelativePose:
    def test_identical_poses(self):
        pose = make_pose(rotation_exp([0.1, -0.2, 0.3]), (1, 2, 3))
        rel = relative_pose(pose, pose)
        assert np.abs(rel.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(rel.translation).max() < 1e-12

    def test_pure_translation_point_transport(self):
        # independent check: transport a world point through both chains
        r = rotation_exp([0.2, 0.1, -0.3])
        t = np.array([0.4, -0.2, 0.1])
        ref = make_pose(r, (1.0, 1.0, 1.0))
        tgt = make_pose(r, np.array([1.0, 1.0, 1.0]) + t)
        rel = relative_pose(ref, tgt)
        assert np.abs(rel.translation - (-r.T @ t)).max() < 1e-12
        point_world = np.array([0.3, 0.7, 4.0])
        p_ref = ref.rotation.T @ (point_world - ref.position)
        p_tgt = tgt.rotation.T @ (point_world - tgt.position)
        assert np.abs(rel.transform(p_ref) - p_tgt).max() < 1e-12

    def test_round_trip_inverse(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = make_pose(rotation_exp(rng.normal(size=3)), rng.normal(size=3))
            b = make_pose(rotation_exp(rng.normal(size=3)), rng.normal(size=3))
            fwd = relative_pose(a, b)
            back = relative_pose(b, a)
            comp_r = fwd.rotation @ back.rotation
            comp_t = fwd.rotation @ back.translation + fwd.translation
            assert np.abs(comp_r - np.eye(3)).max() < 1e-9
            assert np.abs(comp_t).max() < 1e-9

    def test_rotations_stay_orthonormal(self):
        rng = np.random.default_rng(5)
        r = np.eye(3)
        for _ in range(500):
            r = r @ rotation_exp(rng.normal(scale=0.2, size=3))
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9


class TestReprojection:
    def test_identity_motion(self, camera):
        rel = RelativePose.identity()
        for depth in (0.5, 1.0, 7.3):
            assert np.abs(reproject_with_depth(camera, rel, [31.0, 72.0], depth) - [31.0, 72.0]).max() < 1e-12

    def test_disparity_arithmetic(self, camera):
        # camera translated +0.1 m along x: disparity fx*b/d = 5 px leftward
        tgt = make_pose(position=(0.1, 0.0, 0.0))
        rel = relative_pose(make_pose(), tgt)
        out = reproject_with_depth(camera, rel, [50.0, 50.0], 2.0)
        assert np.abs(out - [45.0, 50.0]).max() < 1e-9

    def test_behind_target(self, camera):
        tgt = make_pose(position=(0.0, 0.0, 5.0))
        rel = relative_pose(make_pose(), tgt)
        with pytest.raises(BehindCameraError):
            reproject_with_depth(camera, rel, [50.0, 50.0], 2.0)


class TestTriangulation:
    def test_noiseless_depth_recovery(self, camera):
        tgt = make_pose(rotation_exp([0.0, 0.02, 0.0]), (0.15, 0.02, 0.0))
        rel = relative_pose(make_pose(), tgt)
        point = backproject(camera, [43.0, 58.0], 2.0)
        x_ref = project(camera, point)
        x_tgt = project(camera, rel.transform(point))
        assert abs(triangulate(camera, rel, x_ref, x_tgt) - 2.0) < 1e-9

    def test_zero_baseline(self, camera):
        rel = RelativePose(rotation_exp([0, 0.1, 0]), np.zeros(3))
        with pytest.raises(TriangulationDegenerateError):
            triangulate(camera, rel, [50, 50], [52, 50])

    def test_noise_sensitivity_bounded(self, camera):
        # perturbation oracle: finite-difference sensitivity at the clean config
        tgt = make_pose(position=(0.15, 0.0, 0.0))
        rel = relative_pose(make_pose(), tgt)
        point = backproject(camera, [50.0, 50.0], 2.0)
        x_ref = project(camera, point)
        x_tgt = project(camera, rel.transform(point))
        eps = 1e-4
        d0 = triangulate(camera, rel, x_ref, x_tgt)
        grad = (triangulate(camera, rel, x_ref, x_tgt + [eps, 0.0]) - d0) / eps
        noisy = triangulate(camera, rel, x_ref, x_tgt + [1.0, 0.0])
        assert noisy > 0 and math.isfinite(noisy)
        assert abs(noisy - d0) <= 1.5 * abs(grad) * 1.0 + 1e-9


class TestEpipolarLine:
    def test_reprojections_collinear(self, camera):
        tgt = make_pose(rotation_exp([0.01, -0.03, 0.02]), (0.2, 0.05, 0.03))
        rel = relative_pose(make_pose(), tgt)
        line = epipolar_line(camera, rel, [40.0, 60.0])
        for depth in (0.5, 1.0, 2.0, 8.0):
            pix = reproject_with_depth(camera, rel, [40.0, 60.0], depth)
            off = pix - line.point
            cross = off[0] * line.direction[1] - off[1] * line.direction[0]
            assert abs(cross) < 1e-6

    def test_pure_rotation_degenerate(self, camera):
        rel = RelativePose(rotation_exp([0, 0.05, 0]), np.zeros(3))
        with pytest.raises(EpipolarDegenerateError):
            epipolar_line(camera, rel, [50.0, 50.0])

    def test_direction_matches_two_depth_difference(self, camera):
        tgt = make_pose(position=(0.1, 0.04, 0.0))
        rel = relative_pose(make_pose(), tgt)
        line = epipolar_line(camera, rel, [50.0, 50.0])
        p1 = reproject_with_depth(camera, rel, [50.0, 50.0], 1.0)
        p2 = reproject_with_depth(camera, rel, [50.0, 50.0], 3.0)
        d = (p2 - p1) / np.linalg.norm(p2 - p1)
        assert min(np.abs(d - line.direction).max(), np.abs(d + line.direction).max()) < 1e-9

    def test_closest_point(self, camera):
        tgt = make_pose(position=(0.1, 0.0, 0.0))
        rel = relative_pose(make_pose(), tgt)
        line = epipolar_line(camera, rel, [50.0, 50.0])
        x = np.array([47.0, 53.0])
        foot = closest_point_on_line(line, x)
        assert abs((x - foot) @ line.direction) < 1e-9


def _static_samples(hz, seconds, accel_body, gyro_body):
    n = int(hz * seconds) + 1
    return [
        ImuSample(k / hz, np.asarray(gyro_body, float), np.asarray(accel_body, float))
        for k in range(n)
    ]


class TestImuIntegration:
    gravity = np.array([0.0, 0.0, -9.81])

    def initial(self, velocity=(0, 0, 0)):
        return ImuState(make_pose(), np.asarray(velocity, float), np.zeros(3), np.zeros(3))

    def test_constant_pose(self):
        samples = _static_samples(200, 1.0, [0, 0, 9.81], [0, 0, 0])
        poses = integrate_imu(samples, self.initial(), self.gravity)
        assert len(poses) == len(samples)
        assert np.abs(poses[-1].position).max() < 1e-12
        assert np.abs(poses[-1].rotation - np.eye(3)).max() < 1e-12

    def test_constant_acceleration_kinematics(self):
        a = np.array([0.7, -0.3, 0.2])
        samples = _static_samples(200, 2.0, a + [0, 0, 9.81], [0, 0, 0])
        poses = integrate_imu(samples, self.initial(), self.gravity)
        expected = 0.5 * a * 2.0**2
        assert np.abs(poses[-1].position - expected).max() < 1e-6 * np.linalg.norm(expected)

    def test_constant_yaw_rate(self):
        omega = 0.8
        samples = _static_samples(200, 1.5, [0, 0, 0], [0, 0, omega])
        poses = integrate_imu(
            samples, self.initial(), np.zeros(3)
        )  # zero gravity; accel measures zero
        yaw = math.atan2(poses[-1].rotation[1, 0], poses[-1].rotation[0, 0])
        assert abs(yaw - omega * 1.5) < 1e-6
        assert np.abs(poses[-1].rotation.T @ poses[-1].rotation - np.eye(3)).max() < 1e-9

    def test_unsorted_timestamps(self):
        samples = _static_samples(100, 0.1, [0, 0, 9.81], [0, 0, 0])
        samples[3], samples[4] = samples[4], samples[3]
        with pytest.raises(InputError):
            integrate_imu(samples, self.initial(), self.gravity)

    def test_too_few_samples(self):
        samples = _static_samples(100, 0.0, [0, 0, 9.81], [0, 0, 0])
        with pytest.raises(InputError):
            integrate_imu(samples, self.initial(), self.gravity)


class TestQuaternions:
    def test_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            r = rotation_exp(rng.normal(size=3))
            q = quaternion_from_rotation(r)
            pose = pose_from_quaternion([0, 0, 0], *q)
            assert np.abs(pose.rotation - r).max() < 1e-9
