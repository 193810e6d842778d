"""Uncertainty estimation for visual feature correspondences with inertial guidance.

Given a feature point in a reference image, its visually matched point in a
target image, and a relative pose estimate from inertial odometry, the
library predicts a corrected corresponding point (mean) together with a 2x2
covariance describing where the true correspondence may lie.
"""

from . import energy, fusion, geometry, guidance, synthlab  # noqa: F401
from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401

__version__ = "0.1.0"
