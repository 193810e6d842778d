"""Pinhole camera model, rigid transforms, two-view utilities and IMU integration.

Conventions
-----------
Pixel coordinates are (x, y): x runs along the image width, y along the
height, and (0, 0) is the center of the top-left pixel.  A :class:`Pose`
maps camera coordinates into world coordinates::

    x_world = pose.rotation @ x_cam + pose.position

A :class:`RelativePose` maps reference-camera coordinates into
target-camera coordinates.  Rotations are 3x3 matrices everywhere inside
the library; quaternions are accepted only at file boundaries (see
:func:`pose_from_quaternion`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    DomainError,
    EpipolarDegenerateError,
    InputError,
    TriangulationDegenerateError,
)

_ORTHO_TOL = 1e-9
_BASELINE_EPS = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.setflags(write=False)
    return out


def _check_rotation(r: np.ndarray, what: str) -> None:
    if r.shape != (3, 3):
        raise InputError(f"{what}: rotation must be 3x3, got {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > _ORTHO_TOL:
        raise InputError(f"{what}: rotation not orthonormal (|R'R - I| = {err:.3e})")
    det = np.linalg.det(r)
    if abs(det - 1.0) > 1e-6:
        raise InputError(f"{what}: rotation determinant {det:.9f}, expected +1")


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; no lens distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(self.rotation))
        object.__setattr__(self, "position", _readonly(np.reshape(self.position, 3)))
        _check_rotation(self.rotation, "Pose")

    def transform(self, point_cam: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point_cam, dtype=np.float64) + self.position

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class RelativePose:
    """Maps reference-camera coordinates into target-camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _readonly(self.rotation))
        object.__setattr__(self, "translation", _readonly(np.reshape(self.translation, 3)))
        _check_rotation(self.rotation, "RelativePose")

    def transform(self, point_ref: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point_ref, dtype=np.float64) + self.translation

    def inverse(self) -> "RelativePose":
        rt = self.rotation.T
        return RelativePose(rt, -rt @ self.translation)

    @staticmethod
    def identity() -> "RelativePose":
        return RelativePose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray  # rad/s, body frame
    acceleration: np.ndarray  # m/s^2, specific force in body frame

    def __post_init__(self):
        object.__setattr__(
            self, "angular_velocity", _readonly(np.reshape(self.angular_velocity, 3))
        )
        object.__setattr__(self, "acceleration", _readonly(np.reshape(self.acceleration, 3)))


@dataclass(frozen=True)
class ImuState:
    pose: Pose
    velocity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "velocity", _readonly(np.reshape(self.velocity, 3)))
        object.__setattr__(self, "gyro_bias", _readonly(np.reshape(self.gyro_bias, 3)))
        object.__setattr__(self, "accel_bias", _readonly(np.reshape(self.accel_bias, 3)))


@dataclass(frozen=True)
class EpipolarLine:
    """A line in the target image: point + unit direction."""

    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", _readonly(np.reshape(self.point, 2)))
        object.__setattr__(self, "direction", _readonly(np.reshape(self.direction, 2)))


def rotation_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues map: rotation matrix for a rotation vector ``w`` (radians)."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    K = np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )
    if theta < 1e-8:
        # second-order series; exact enough below the threshold
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def pose_from_quaternion(position: Sequence[float], qx, qy, qz, qw) -> Pose:
    """Build a Pose from a TUM-style (tx ty tz qx qy qz qw) record."""
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n < 1e-12:
        raise InputError("zero-norm quaternion")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    r = np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )
    return Pose(r, np.asarray(position, dtype=np.float64))


def quaternion_from_rotation(r: np.ndarray) -> tuple[float, float, float, float]:
    """Return (qx, qy, qz, qw) for a rotation matrix, w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        qw = (r[2, 1] - r[1, 2]) / s
        qx = 0.25 * s
        qy = (r[0, 1] + r[1, 0]) / s
        qz = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        qw = (r[0, 2] - r[2, 0]) / s
        qx = (r[0, 1] + r[1, 0]) / s
        qy = 0.25 * s
        qz = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        qw = (r[1, 0] - r[0, 1]) / s
        qx = (r[0, 2] + r[2, 0]) / s
        qy = (r[1, 2] + r[2, 1]) / s
        qz = 0.25 * s
    if qw < 0:
        qx, qy, qz, qw = -qx, -qy, -qz, -qw
    return qx, qy, qz, qw


def project(camera: CameraModel, point: np.ndarray) -> np.ndarray:
    """Project a 3D point in camera coordinates to a pixel."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= 0:
        raise DomainError(f"cannot project point with depth {p[2]}")
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


def backproject(camera: CameraModel, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Lift a pixel to a 3D point in camera coordinates at the given depth."""
    if depth <= 0:
        raise DomainError(f"backprojection needs depth > 0, got {depth}")
    x, y = np.asarray(pixel, dtype=np.float64).reshape(2)
    return np.array([(x - camera.cx) / camera.fx * depth, (y - camera.cy) / camera.fy * depth, depth])


def relative_pose(reference: Pose, target: Pose) -> RelativePose:
    """Transform taking reference-camera coordinates into target-camera coordinates."""
    rt = target.rotation.T
    return RelativePose(rt @ reference.rotation, rt @ (reference.position - target.position))


def reproject_with_depth(
    camera: CameraModel, rel: RelativePose, x_ref: np.ndarray, depth: float
) -> np.ndarray:
    """Reproject a reference pixel into the target image assuming its depth."""
    p_tgt = rel.transform(backproject(camera, x_ref, depth))
    if p_tgt[2] <= 0:
        raise BehindCameraError(
            f"pixel {np.asarray(x_ref).tolist()} at depth {depth} maps behind the target camera"
        )
    return project(camera, p_tgt)


def triangulate(
    camera: CameraModel, rel: RelativePose, x_ref: np.ndarray, x_tgt: np.ndarray
) -> float:
    """Midpoint-method depth of a correspondence, in the reference frame.

    Finds the closest points of the two viewing rays and returns the z of
    their midpoint in reference-camera coordinates.
    """
    t = rel.translation
    if np.linalg.norm(t) < _BASELINE_EPS:
        raise TriangulationDegenerateError("baseline too short to triangulate")
    d1 = backproject(camera, x_ref, 1.0)
    d1 = d1 / np.linalg.norm(d1)
    # target ray expressed in the reference frame
    rt = rel.rotation.T
    o2 = -rt @ t
    d2 = rt @ backproject(camera, x_tgt, 1.0)
    d2 = d2 / np.linalg.norm(d2)
    b = float(d1 @ d2)
    denom = 1.0 - b * b
    if denom < 1e-12:
        raise TriangulationDegenerateError("viewing rays are near parallel")
    w1 = float(d1 @ o2)
    w2 = float(d2 @ o2)
    s = (w1 - b * w2) / denom
    u = (b * w1 - w2) / denom
    midpoint = 0.5 * (s * d1 + (o2 + u * d2))
    depth = float(midpoint[2])
    if depth <= 0:
        raise TriangulationDegenerateError(f"triangulated depth {depth:.6g} not positive")
    return depth


def epipolar_line(camera: CameraModel, rel: RelativePose, x_ref: np.ndarray) -> EpipolarLine:
    """Locus in the target image of all positive-depth reprojections of x_ref."""
    t = rel.translation
    if np.linalg.norm(t) < _BASELINE_EPS:
        raise EpipolarDegenerateError("zero baseline: epipolar line collapses to a point")
    m = rel.rotation @ backproject(camera, x_ref, 1.0)
    # choose two depths with positive target-frame z: z(d) = d*m_z + t_z
    if m[2] > 1e-12:
        d_min = max(0.0, -t[2] / m[2])
        d1, d2 = d_min + 1.0, d_min + 2.0
    elif m[2] < -1e-12:
        d_max = -t[2] / m[2]
        if d_max <= 0:
            raise EpipolarDegenerateError("reference ray never visible in target image")
        d1, d2 = d_max / 3.0, 2.0 * d_max / 3.0
    else:
        if t[2] <= 0:
            raise EpipolarDegenerateError("reference ray never visible in target image")
        d1, d2 = 1.0, 2.0
    p1 = project(camera, d1 * m + t)
    p2 = project(camera, d2 * m + t)
    diff = p2 - p1
    n = np.linalg.norm(diff)
    if n < 1e-12:
        raise EpipolarDegenerateError("epipolar direction is undefined")
    return EpipolarLine(p1, diff / n)


def closest_point_on_line(line: EpipolarLine, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(2)
    s = float((x - line.point) @ line.direction)
    return line.point + s * line.direction


def integrate_imu(
    samples: Sequence[ImuSample], initial: ImuState, gravity: np.ndarray
) -> list[Pose]:
    """Integrate IMU samples with the midpoint rule.

    World acceleration is recovered as R @ (a_measured - accel_bias) + gravity,
    with the rotation taken at the interval midpoint; orientation integrates
    the bias-corrected angular rate.  Returns one pose per sample timestamp,
    the first being the initial pose.
    """
    if len(samples) < 2:
        raise InputError("need at least two IMU samples")
    times = np.array([s.timestamp for s in samples])
    if not np.all(np.diff(times) > 0):
        raise InputError("IMU timestamps must be strictly increasing")
    g = np.asarray(gravity, dtype=np.float64).reshape(3)

    r = initial.pose.rotation.copy()
    p = initial.pose.position.copy()
    v = initial.velocity.copy()
    bg = initial.gyro_bias
    ba = initial.accel_bias

    poses = [Pose(r, p)]
    for k in range(len(samples) - 1):
        s0, s1 = samples[k], samples[k + 1]
        dt = s1.timestamp - s0.timestamp
        w_mid = 0.5 * (s0.angular_velocity + s1.angular_velocity) - bg
        r_half = r @ rotation_exp(w_mid * (0.5 * dt))
        a_mid = 0.5 * (s0.acceleration + s1.acceleration) - ba
        a_world = r_half @ a_mid + g
        r = r @ rotation_exp(w_mid * dt)
        p = p + v * dt + 0.5 * a_world * dt * dt
        v = v + a_world * dt
        poses.append(Pose(r, p))
    return poses
