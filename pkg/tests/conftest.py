import numpy as np
import pytest

from featuncert.energy import ImagePlane
from featuncert.geometry import CameraModel, Pose


@pytest.fixture
def camera():
    return CameraModel(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)


def make_pose(rotation=None, position=(0.0, 0.0, 0.0)):
    return Pose(np.eye(3) if rotation is None else rotation, np.asarray(position, dtype=float))


def radial_image(size=64, cx=32.0, cy=32.0, width_px=6.0):
    """Even (mirror-symmetric about the center pixel) smooth test image."""
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    r2 = (xs - cx) ** 2 + (ys - cy) ** 2
    vals = 0.25 + 0.5 * np.exp(-r2 / (2.0 * width_px**2))
    return ImagePlane(vals)


def checker_image(size=64, period=7, lo=0.2, hi=0.8, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size]
    base = np.where(((xs // period) + (ys // period)) % 2 == 0, lo, hi).astype(float)
    base += rng.uniform(-0.05, 0.05, size=base.shape)
    return ImagePlane(np.clip(base, 0.0, 1.0))
