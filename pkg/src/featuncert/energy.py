"""Patch-error energies on sample grids, scale fitting and energy combination.

The image evidence enters as a root-mean-square patch error e(x) between the
reference patch and the target patch centered at a candidate x.  Its scale k
is fitted so that the implied density matches the guidance prior, with the
density at the visual point pinned to the prior's value there::

    p_k(x) = q(x_v) * exp(-k * (e(x) - e(x_v)))

k* is the root (found by bisection) of the pseudo-KL objective

    J(k) = sum_X p_k(x) * log(p_k(x) / q(x))

which vanishes exactly when the scaled patch-error field reproduces the
prior's shape on the sample set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, EnergyFitError, PatchOutOfBoundsError, SamplingError
from .guidance import GuidanceConfig, GuidanceModel, SampleGrid, distance_energy, guidance_density

_FLAT_FIELD_TOL = 1e-9


@dataclass(frozen=True)
class EnergyConfig:
    """Patch and fit parameters.

    patch_half: half-size of the square displacement set; the patch has
        (2*patch_half)^2 samples.
    lambda_lo / lambda_hi: clamp range of the automatic guidance weight
        (set both to the same value to force it).
    k_min / k_max: bisection bracket for the energy scale.
    fit_tol: absolute bisection tolerance on k.
    """

    patch_half: int = 5
    lambda_lo: float = 0.1
    lambda_hi: float = 0.9
    k_min: float = 1e-6
    k_max: float = 1e4
    fit_tol: float = 1e-9
    max_bisect_iters: int = 100

    def __post_init__(self):
        if self.patch_half < 1:
            raise ConfigurationError("patch_half must be >= 1")
        if not (0.0 <= self.lambda_lo <= self.lambda_hi <= 1.0):
            raise ConfigurationError("need 0 <= lambda_lo <= lambda_hi <= 1")
        if not (0 < self.k_min < self.k_max):
            raise ConfigurationError("need 0 < k_min < k_max")


@dataclass(frozen=True)
class ImagePlane:
    """Grayscale image with intensities in [0, 1], indexed [y, x]."""

    intensities: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.intensities, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
            raise ValueError("intensities must be a 2D array, at least 2x2")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)

    @property
    def width(self) -> int:
        return self.intensities.shape[1]

    @property
    def height(self) -> int:
        return self.intensities.shape[0]


@dataclass(frozen=True)
class PatchErrorField:
    """Patch RMSE at the grid points of one hypothesis.

    ``errors`` is aligned with ``grid.points``; entries are NaN where the
    point is outside the image or its patch does not fit.  ``valid_mask``
    marks the usable entries.
    """

    grid: SampleGrid
    errors: np.ndarray
    error_at_xv: float
    valid_mask: np.ndarray

    @property
    def valid_count(self) -> int:
        return int(self.valid_mask.sum())


@dataclass(frozen=True)
class ScaledEnergy:
    """Energy scale k* and the pinned densities p_k at the grid points."""

    k_star: float
    densities: np.ndarray  # 0 at invalid points
    degenerate: bool  # flat patch-error field, scale not identifiable


@dataclass(frozen=True)
class CombinedWeights:
    """Per-point values of the combined (image + guidance) density."""

    lam: float
    weights: np.ndarray  # 0 at invalid points
    z_image: float  # envelope normalizer of the image-energy density
    z_guidance: float


def patch_offsets(patch_half: int) -> np.ndarray:
    """Displacement set of a square patch centered on the query point.

    (2*patch_half)^2 unit-spaced offsets at half-integer positions, symmetric
    about the center so a mirror-symmetric image yields a symmetric error
    surface.
    """
    r = np.arange(-patch_half, patch_half, dtype=np.float64) + 0.5
    dx, dy = np.meshgrid(r, r)
    return np.column_stack([dx.ravel(), dy.ravel()])


def sample_intensity(image: ImagePlane, point: np.ndarray) -> float:
    """Bilinear intensity at a subpixel location."""
    x, y = np.asarray(point, dtype=np.float64).reshape(2)
    if not (0.0 <= x <= image.width - 1 and 0.0 <= y <= image.height - 1):
        raise SamplingError(f"point ({x}, {y}) outside image {image.width}x{image.height}")
    return float(
        kernels.bilinear_many(image.intensities, np.array([x]), np.array([y]))[0]
    )


def _reference_patch(image: ImagePlane, center: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    xs = center[0] + offsets[:, 0]
    ys = center[1] + offsets[:, 1]
    if xs.min() < 0 or xs.max() > image.width - 1 or ys.min() < 0 or ys.max() > image.height - 1:
        raise PatchOutOfBoundsError(
            f"reference patch at {center.tolist()} exits the {image.width}x{image.height} image"
        )
    return kernels.bilinear_many(image.intensities, xs, ys)


def patch_errors_at(
    ref_image: ImagePlane,
    tgt_image: ImagePlane,
    ref_centers: np.ndarray,
    points: np.ndarray,
    patch_half: int,
) -> np.ndarray:
    """Patch RMSE at arbitrary target points, averaged over reference centers.

    Returns NaN where the target patch does not fit.  Raises if any
    reference patch does not fit (the reference is shared by all points).
    """
    offsets = patch_offsets(patch_half)
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    centers = np.atleast_2d(np.asarray(ref_centers, dtype=np.float64))
    total = np.zeros(pts.shape[0])
    for center in centers:
        ref_patch = _reference_patch(ref_image, center, offsets)
        total += kernels.patch_rmse_from_ref(tgt_image.intensities, ref_patch, pts, offsets)
    return total / centers.shape[0]


def patch_rmse(
    ref_image: ImagePlane,
    tgt_image: ImagePlane,
    x_ref: np.ndarray,
    x: np.ndarray,
    patch_half: int = 5,
) -> float:
    """RMS intensity difference between the two patches centered at x_ref and x."""
    err = patch_errors_at(
        ref_image,
        tgt_image,
        np.asarray(x_ref, dtype=np.float64).reshape(1, 2),
        np.asarray(x, dtype=np.float64).reshape(1, 2),
        patch_half,
    )[0]
    if math.isnan(err):
        raise PatchOutOfBoundsError(
            f"target patch at {np.asarray(x).tolist()} exits the image"
        )
    return float(err)


def compute_patch_error_field(
    ref_image: ImagePlane,
    tgt_image: ImagePlane,
    ref_centers: np.ndarray,
    x_v: np.ndarray,
    grid: SampleGrid,
    config: EnergyConfig,
) -> PatchErrorField:
    """Evaluate the patch error at every usable grid point and at x_v."""
    x_v = np.asarray(x_v, dtype=np.float64).reshape(2)
    errors = np.full(grid.points.shape[0], np.nan)
    idx = np.flatnonzero(grid.in_bounds_mask)
    if idx.size:
        errors[idx] = patch_errors_at(
            ref_image, tgt_image, ref_centers, grid.points[idx], config.patch_half
        )
    e_v = patch_errors_at(ref_image, tgt_image, ref_centers, x_v.reshape(1, 2), config.patch_half)[0]
    if math.isnan(e_v):
        raise PatchOutOfBoundsError("patch at the visual corresponding point exits the image")
    valid = np.isfinite(errors)
    return PatchErrorField(grid, errors, float(e_v), valid)


def fit_energy_scale(
    field: PatchErrorField, model: GuidanceModel, config: GuidanceConfig, ecfg: EnergyConfig
) -> ScaledEnergy:
    """Bisect the pseudo-KL objective for the patch-error scale k*.

    A flat field (no contrast between candidates) has no identifiable scale;
    it is flagged degenerate with k* = 1 and uniform pinned densities.
    """
    valid = field.valid_mask
    if int(valid.sum()) < 4:
        raise ValueError("need at least 4 valid grid points to fit the energy scale")
    q_v = guidance_density(model, model.x_v, config)
    errors = field.errors[valid]
    if max(errors.max(), field.error_at_xv) - min(errors.min(), field.error_at_xv) < _FLAT_FIELD_TOL:
        densities = np.zeros_like(field.errors)
        densities[valid] = q_v
        return ScaledEnergy(1.0, densities, True)

    delta = np.ascontiguousarray(errors - field.error_at_xv)
    psi = distance_energy(model, field.grid.points[valid])
    psi_v = float(distance_energy(model, model.x_v.reshape(1, 2))[0])
    u = np.ascontiguousarray(psi - psi_v)

    def objective(k: float) -> float:
        return kernels.kl_objective(delta, u, config.alpha, k)

    lo = ecfg.k_min
    f_lo = objective(lo)
    hi = min(1.0, ecfg.k_max)
    f_hi = objective(hi)
    while f_lo * f_hi > 0.0 and hi < ecfg.k_max:
        hi = min(hi * 10.0, ecfg.k_max)
        f_hi = objective(hi)
    if f_lo * f_hi > 0.0:
        raise EnergyFitError(
            f"no sign change of the fit objective in [{ecfg.k_min:g}, {ecfg.k_max:g}]"
        )
    for _ in range(ecfg.max_bisect_iters):
        mid = 0.5 * (lo + hi)
        f_mid = objective(mid)
        if f_lo * f_mid <= 0.0:
            hi = mid
        else:
            lo, f_lo = mid, f_mid
        if hi - lo < ecfg.fit_tol:
            break
    k_star = 0.5 * (lo + hi)

    densities = np.zeros_like(field.errors)
    densities[valid] = q_v * np.exp(-k_star * delta)
    return ScaledEnergy(k_star, densities, False)


def image_energy(
    scaled: ScaledEnergy, field: PatchErrorField, model: GuidanceModel, config: GuidanceConfig
) -> np.ndarray:
    """Negative log of the pinned image density at the valid grid points."""
    q_v = guidance_density(model, model.x_v, config)
    return scaled.k_star * (field.errors[field.valid_mask] - field.error_at_xv) - math.log(q_v)


def combine_energies(
    scaled: ScaledEnergy,
    model: GuidanceModel,
    field: PatchErrorField,
    config: GuidanceConfig,
    ecfg: EnergyConfig,
) -> CombinedWeights:
    """Blend image and guidance energies into one density over the grid.

    The blend weight lambda is set from the two energy floors: a high image
    floor (the visual match explains the data poorly) shifts trust toward
    the guidance prior.  Each side keeps its own normalizer, folded
    geometrically, so lambda = 1 reduces exactly to the guidance density and
    lambda = 0 to the scaled image density.  A degenerate fit forces
    lambda = 1.
    """
    valid = field.valid_mask
    pts = field.grid.points[valid]
    e_dist = config.alpha * distance_energy(model, pts)
    weights = np.zeros_like(field.errors)

    if scaled.degenerate:
        weights[valid] = np.exp(-e_dist) / model.z_norm
        return CombinedWeights(1.0, weights, math.nan, model.z_norm)

    e_img = image_energy(scaled, field, model, config)
    lam_raw = e_img.min() / (e_img.min() + e_dist.min() + 1e-9)
    lam = float(np.clip(lam_raw, ecfg.lambda_lo, ecfg.lambda_hi))

    # envelope normalizer of the image density, quadrature over the grid
    z_img = float(np.sum(np.exp(-e_img) * field.grid.quad_weights[valid]))
    combined = (1.0 - lam) * e_img + lam * e_dist
    norm = z_img ** (1.0 - lam) * model.z_norm**lam
    weights[valid] = np.exp(np.clip(-combined, -745.0, 709.0)) / norm
    return CombinedWeights(lam, weights, z_img, model.z_norm)
