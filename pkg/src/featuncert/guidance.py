"""Guidance sampling, prior calibration and possible-correspondence grids.

A guidance point is the reprojection of the reference feature into the
target image through the inertial pose estimate and a sampled depth.  Each
guidance point defines an asymmetric Laplace-like prior density over
possible corresponding points, expressed in a frame rotated so that axis 1
runs from the visual point x_v toward the guidance point x_g::

    psi_d(x) = beta * |x - x_v|_1 + (1 - beta) * |x - x_g|_1     (rotated frame)
    q(x)     = exp(-alpha * psi_d(x)) / z_norm

beta is calibrated so that the density ratio q(x_v) / q(x_g) equals a
target ratio growing linearly with the separation D = |x_g - x_v|, and
z_norm has a closed form because psi_d separates per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    ConfigurationError,
    EpipolarDegenerateError,
    GridDegenerateError,
    InputError,
    NoGuidanceError,
)
from .geometry import (
    CameraModel,
    RelativePose,
    closest_point_on_line,
    epipolar_line,
    reproject_with_depth,
)


def _readonly(a, shape=None) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if shape is not None:
        out = out.reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GuidanceConfig:
    """Parameters of the guidance prior and sampling grid.

    alpha: energy scale (1/px).
    r_max: density ratio q(x_v)/q(x_g) reached when the guidance point sits
        at the clipping distance; must be >= 1.
    d_max: clipping distance for guidance points (px).
    l0: default half-size of the sample grid when x_g == x_v (px).
    n: per-axis grid subdivisions; the grid has (n+1)^2 points.
    depth_sigma_ratio: std of the sampled depth as a fraction of the mean.
    num_guidance: number of depth hypotheses (first is always the mean).
    epipolar_candidate: also use the epipolar point nearest to x_v as an
        extra guidance hypothesis.
    """

    alpha: float = 0.89
    r_max: float = 3.0
    d_max: float = 3.0
    l0: float = 1.0
    n: int = 3
    depth_sigma_ratio: float = 0.1
    num_guidance: int = 3
    epipolar_candidate: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.r_max < 1:
            raise ConfigurationError("r_max must be >= 1")
        if self.d_max <= 0:
            raise ConfigurationError("d_max must be positive")
        if self.l0 <= 0:
            raise ConfigurationError("l0 must be positive")
        if self.n < 1:
            raise ConfigurationError("n must be >= 1")
        if self.depth_sigma_ratio < 0:
            raise ConfigurationError("depth_sigma_ratio must be >= 0")
        if self.num_guidance < 1:
            raise ConfigurationError("num_guidance must be >= 1")
        # (1-beta(D))*D = D/2 - log(r(D))/(2 alpha) is convex in D with value 0
        # at D = 0, so its maximum over [0, d_max] sits at the far endpoint.
        shrink = 0.5 * self.d_max - math.log(self.r_max) / (2.0 * self.alpha)
        if self.l0 - max(0.0, shrink) <= 0:
            raise ConfigurationError(
                "grid half-size l0 - (1-beta)*D is not positive over the whole "
                f"clipping range (l0={self.l0}, worst shrink={max(0.0, shrink):.6g}); "
                "reduce d_max or increase l0/alpha"
            )

    def ratio_at(self, dist: float) -> float:
        """Target density ratio at separation ``dist``; grows linearly to r_max."""
        return 1.0 + (self.r_max - 1.0) * dist / self.d_max

    def beta_at(self, dist: float) -> float:
        """Visual-point weight solving the density-ratio condition at ``dist``."""
        if dist <= 0.0:
            return 0.5 + (self.r_max - 1.0) / (2.0 * self.alpha * self.d_max)
        return 0.5 + math.log(self.ratio_at(dist)) / (2.0 * self.alpha * dist)


@dataclass(frozen=True)
class GuidancePoint:
    position: np.ndarray  # pixel in the target image
    clipped: bool
    source_depth: float  # meters; NaN for the epipolar candidate

    def __post_init__(self):
        object.__setattr__(self, "position", _readonly(self.position, 2))


@dataclass(frozen=True)
class GuidanceModel:
    """One calibrated guidance hypothesis."""

    x_v: np.ndarray
    x_g: np.ndarray
    frame_rotation: np.ndarray  # 2x2; maps (x - x_v) into the rotated frame
    dist: float  # |x_g - x_v|
    beta: float
    z_norm: float

    def __post_init__(self):
        object.__setattr__(self, "x_v", _readonly(self.x_v, 2))
        object.__setattr__(self, "x_g", _readonly(self.x_g, 2))
        object.__setattr__(self, "frame_rotation", _readonly(self.frame_rotation, (2, 2)))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Rotated-frame coordinates (axis 1 toward x_g) of image points."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.x_v) @ self.frame_rotation.T

    def to_image(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local, dtype=np.float64) @ self.frame_rotation + self.x_v


@dataclass(frozen=True)
class SampleGrid:
    """The (n+1)^2 possible-correspondence points of one hypothesis.

    ``quad_weights`` carries each node's quadrature cell measure (px^2), the
    outer product of per-axis Newton-Cotes coefficients times the envelope
    area, so that sum(f * quad_weights) approximates the envelope integral
    of f.
    """

    points: np.ndarray  # ((n+1)^2, 2) pixels
    l: float  # near-side half extent (axis-1 negative side and axis 2)
    h_extent: float  # envelope height H = 2l in the rotated frame
    w_extent: float  # envelope width W along axis 1
    in_bounds_mask: np.ndarray
    quad_weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _readonly(self.points))
        object.__setattr__(self, "quad_weights", _readonly(self.quad_weights))
        mask = np.ascontiguousarray(self.in_bounds_mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "in_bounds_mask", mask)


# closed Newton-Cotes coefficients (normalized to sum 1) per node count
_NEWTON_COTES = {
    2: np.array([1.0, 1.0]) / 2.0,
    3: np.array([1.0, 4.0, 1.0]) / 6.0,
    4: np.array([1.0, 3.0, 3.0, 1.0]) / 8.0,
    5: np.array([7.0, 32.0, 12.0, 32.0, 7.0]) / 90.0,
    6: np.array([19.0, 75.0, 50.0, 50.0, 75.0, 19.0]) / 288.0,
    7: np.array([41.0, 216.0, 27.0, 272.0, 27.0, 216.0, 41.0]) / 840.0,
}


def _axis_quadrature(n: int) -> np.ndarray:
    """Per-axis node coefficients for n+1 equally spaced nodes, sum 1."""
    if n + 1 in _NEWTON_COTES:
        return _NEWTON_COTES[n + 1]
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return w / w.sum()


def sample_depths(depth_mean: float, config: GuidanceConfig, rng_seed: int) -> list[float]:
    """Depth hypotheses: the mean first, then positive Gaussian draws around it."""
    if depth_mean <= 0:
        raise InputError(f"depth mean must be positive, got {depth_mean}")
    out = [float(depth_mean)]
    need = config.num_guidance - 1
    if need == 0:
        return out
    rng = np.random.default_rng(rng_seed)
    sigma = config.depth_sigma_ratio * depth_mean
    while need > 0:
        draws = rng.normal(depth_mean, sigma, size=max(need, 8))
        for d in draws:
            if d > 0 and need > 0:
                out.append(float(d))
                need -= 1
    return out


def sample_guidance_points(
    camera: CameraModel,
    rel: RelativePose,
    x_ref: np.ndarray,
    x_v: np.ndarray,
    depths: list[float],
    config: GuidanceConfig,
) -> list[GuidancePoint]:
    """Reproject each depth hypothesis and clip the result around x_v.

    Depths whose reprojection lands behind the target camera are dropped.
    With ``epipolar_candidate`` set, the epipolar point nearest to x_v is
    appended as one extra hypothesis.
    """
    x_v = np.asarray(x_v, dtype=np.float64).reshape(2)
    candidates: list[tuple[np.ndarray, float]] = []
    for d in depths:
        try:
            candidates.append((reproject_with_depth(camera, rel, x_ref, d), float(d)))
        except BehindCameraError:
            continue
    if config.epipolar_candidate:
        try:
            line = epipolar_line(camera, rel, x_ref)
            candidates.append((closest_point_on_line(line, x_v), math.nan))
        except EpipolarDegenerateError:
            pass
    if not candidates:
        raise NoGuidanceError("all depth hypotheses reprojected behind the target camera")

    points = []
    for pos, d in candidates:
        offset = pos - x_v
        dist = float(np.linalg.norm(offset))
        if dist > config.d_max:
            pos = x_v + offset * (config.d_max / dist)
            points.append(GuidancePoint(pos, True, d))
        else:
            points.append(GuidancePoint(pos, False, d))
    return points


def _axis1_integral(alpha: float, beta: float, dist: float) -> float:
    """Closed-form integral of exp(-alpha*(beta|u| + (1-beta)|u-D|)) over u.

    Three exponential pieces (u < 0, 0 <= u <= D, u > D); the middle piece
    uses expm1 so the beta -> 1/2 and D -> 0 limits are exact.
    """
    edge = math.exp(-alpha * (1.0 - beta) * dist) / alpha + math.exp(-alpha * beta * dist) / alpha
    x = alpha * (2.0 * beta - 1.0) * dist
    if x <= 0.0:
        mid_factor = 1.0
    else:
        mid_factor = -math.expm1(-x) / x
    mid = math.exp(-alpha * (1.0 - beta) * dist) * dist * mid_factor
    return edge + mid


def calibrate_guidance(
    x_v: np.ndarray, point: GuidancePoint, config: GuidanceConfig
) -> GuidanceModel:
    """Fit the prior for one guidance point: frame, beta and normalization."""
    x_v = np.asarray(x_v, dtype=np.float64).reshape(2)
    offset = point.position - x_v
    dist = float(np.linalg.norm(offset))
    if dist > config.d_max + 1e-9:
        raise InputError(f"guidance point at distance {dist:.6g} exceeds d_max={config.d_max}")
    beta = config.beta_at(dist)
    if not (0.5 < beta <= 1.0 + 1e-12):
        raise ConfigurationError(
            f"beta={beta:.6g} outside (1/2, 1]; alpha/r_max/d_max combination is invalid"
        )
    beta = min(beta, 1.0)
    if dist < 1e-12:
        rot = np.eye(2)
    else:
        c, s = offset / dist
        rot = np.array([[c, s], [-s, c]])
    z_norm = _axis1_integral(config.alpha, beta, dist) * (2.0 / config.alpha)
    return GuidanceModel(x_v, point.position, rot, dist, beta, z_norm)


def distance_energy(model: GuidanceModel, points: np.ndarray) -> np.ndarray:
    """psi_d at image points: weighted L1 distances in the rotated frame."""
    local = model.to_local(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    u, v = local[:, 0], local[:, 1]
    return model.beta * (np.abs(u) + np.abs(v)) + (1.0 - model.beta) * (
        np.abs(u - model.dist) + np.abs(v)
    )


def guidance_density(model: GuidanceModel, x: np.ndarray, config: GuidanceConfig) -> float:
    return float(guidance_density_many(model, np.asarray(x, dtype=np.float64).reshape(1, 2), config)[0])


def guidance_density_many(
    model: GuidanceModel, points: np.ndarray, config: GuidanceConfig
) -> np.ndarray:
    return np.exp(-config.alpha * distance_energy(model, points)) / model.z_norm


def grid_extents(model: GuidanceModel, config: GuidanceConfig) -> tuple[float, float, float]:
    """(l, W, H) of the envelope in the rotated frame.

    The square of half-size l0 deforms with the separation: the near sides
    close in by (1-beta)*D while the far side opens up, until the guidance
    point is distant enough that the aspect ratio is restrained and the
    envelope shrinks toward x_v instead.
    """
    l = config.l0 - (1.0 - model.beta) * model.dist
    h = 2.0 * l
    if model.dist < config.l0 / model.beta:
        w = 2.0 * config.l0
    else:
        w = 2.0 * model.beta * l / (2.0 * model.beta - 1.0)
    return l, w, h


def build_grid(
    model: GuidanceModel, config: GuidanceConfig, image_bounds: tuple[int, int]
) -> SampleGrid:
    """Place the (n+1)^2 sample points and mask those outside the image."""
    l, w, h = grid_extents(model, config)
    steps = np.arange(config.n + 1, dtype=np.float64)
    u = steps * (w / config.n) - l
    v = steps * (h / config.n) - l
    uu, vv = np.meshgrid(u, v)
    local = np.column_stack([uu.ravel(), vv.ravel()])
    points = model.to_image(local)

    coeffs = _axis_quadrature(config.n)
    quad = np.outer(coeffs, coeffs).ravel() * (w * h)

    width, height = image_bounds
    mask = (
        (points[:, 0] >= 0.0)
        & (points[:, 0] <= width - 1.0)
        & (points[:, 1] >= 0.0)
        & (points[:, 1] <= height - 1.0)
    )
    if int(mask.sum()) < 4:
        raise GridDegenerateError(
            f"only {int(mask.sum())} grid points inside the image; feature too close to border"
        )
    return SampleGrid(points, l, h, w, mask, quad)
