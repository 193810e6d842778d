"""Marginalization of guidance hypotheses and the end-to-end estimator.

Each guidance hypothesis contributes a combined density evaluated at its own
sample-grid points.  Pooling every point with its density value as weight
(normalized to total mass 1) gives the corrected mean and the 2x2
covariance of the correspondence.  Track-level helpers propagate the
corrected point along an image sequence and rescale covariances so each
image carries the same average determinant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import (
    CombinedWeights,
    EnergyConfig,
    ImagePlane,
    PatchErrorField,
    ScaledEnergy,
    combine_energies,
    compute_patch_error_field,
    fit_energy_scale,
)
from .errors import (
    ConfigurationError,
    EnergyFitError,
    GridDegenerateError,
    InputError,
    MarginalizationFailedError,
    NoGuidanceError,
    PatchOutOfBoundsError,
    TriangulationDegenerateError,
)
from .geometry import CameraModel, RelativePose, triangulate
from .guidance import (
    GuidanceConfig,
    GuidanceModel,
    GuidancePoint,
    SampleGrid,
    build_grid,
    calibrate_guidance,
    guidance_density,
    sample_depths,
    sample_guidance_points,
)

COVARIANCE_EIGEN_FLOOR = 1e-9  # px^2


@dataclass(frozen=True)
class FusionConfig:
    """Marginalization and track-level parameters.

    target_det: average covariance determinant each image is scaled to,
        matching the magnitude of a scaled-identity baseline covariance.
    fallback_sigma: per-axis std (px) of the covariance reported when no
        hypothesis survives.
    """

    target_det: float = 1.0
    fallback_sigma: float = 1.0
    det_floor: float = 1e-17

    def __post_init__(self):
        if self.target_det <= 0 or self.fallback_sigma <= 0:
            raise ConfigurationError("target_det and fallback_sigma must be positive")


@dataclass(frozen=True)
class EstimatorConfig:
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0


@dataclass(frozen=True)
class CorrespondenceQuery:
    """Everything the estimator conditions on for one correspondence."""

    x_ref: np.ndarray  # reference point in the reference image
    x_v: np.ndarray  # visually matched point in the target image
    ref_image: ImagePlane
    tgt_image: ImagePlane
    camera: CameraModel
    rel_pose: RelativePose
    depth: float | None = None  # depth prior; triangulated when absent
    extra_ref_points: tuple = ()  # additional reference patch centers

    def __post_init__(self):
        x_ref = np.asarray(self.x_ref, dtype=np.float64).reshape(2)
        x_v = np.asarray(self.x_v, dtype=np.float64).reshape(2)
        for name, pt, img in (("x_ref", x_ref, self.ref_image), ("x_v", x_v, self.tgt_image)):
            if not (0 <= pt[0] <= img.width - 1 and 0 <= pt[1] <= img.height - 1):
                raise InputError(f"{name}={pt.tolist()} outside its image")
        object.__setattr__(self, "x_ref", x_ref)
        object.__setattr__(self, "x_v", x_v)

    def reference_centers(self) -> np.ndarray:
        pts = [self.x_ref] + [np.asarray(p, dtype=np.float64).reshape(2) for p in self.extra_ref_points]
        return np.vstack(pts)


@dataclass(frozen=True)
class HypothesisDiagnostics:
    k_star: float
    lam: float
    clipped: bool
    degenerate: bool


@dataclass(frozen=True)
class CorrespondenceUncertainty:
    mean: np.ndarray
    covariance: np.ndarray
    hypotheses_used: int
    diagnostics: tuple[HypothesisDiagnostics, ...] = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        cov = np.asarray(self.covariance, dtype=np.float64).reshape(2, 2)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def is_fallback(self) -> bool:
        return self.hypotheses_used == 0


@dataclass(frozen=True)
class Hypothesis:
    """All intermediate products of one guidance hypothesis."""

    point: GuidancePoint
    model: GuidanceModel
    grid: SampleGrid
    field: PatchErrorField
    scaled: ScaledEnergy
    combined: CombinedWeights


@dataclass(frozen=True)
class TrackState:
    track_id: int
    latest_mean: np.ndarray
    latest_covariance: np.ndarray
    latest_visual: np.ndarray
    first_frame: int
    latest_frame: int
    accumulated_covariance: np.ndarray


def symmetrize_floor(cov: np.ndarray, floor: float = COVARIANCE_EIGEN_FLOOR) -> np.ndarray:
    """Symmetrize a 2x2 covariance and raise its eigenvalues to ``floor``.

    Closed-form eigendecomposition keeps the result deterministic across
    platforms (no LAPACK involved).
    """
    c = np.asarray(cov, dtype=np.float64).reshape(2, 2)
    a = c[0, 0]
    b = 0.5 * (c[0, 1] + c[1, 0])
    d = c[1, 1]
    mean = 0.5 * (a + d)
    radius = math.hypot(0.5 * (a - d), b)
    lam1 = mean + radius
    lam2 = mean - radius
    if lam2 >= floor:
        return np.array([[a, b], [b, d]])
    lam1 = max(lam1, floor)
    lam2 = floor
    if radius < 1e-15:
        return np.array([[lam2, 0.0], [0.0, lam2]])
    if abs(b) < 1e-15:
        return np.array([[max(a, floor), 0.0], [0.0, max(d, floor)]])
    v = np.array([lam1 - d, b])
    v /= np.linalg.norm(v)
    w = np.array([-v[1], v[0]])
    out = lam1 * np.outer(v, v) + lam2 * np.outer(w, w)
    return 0.5 * (out + out.T)


def eigen_2x2(cov: np.ndarray) -> tuple[float, float, np.ndarray]:
    """(major eigenvalue, minor eigenvalue, major axis direction) of a 2x2."""
    c = np.asarray(cov, dtype=np.float64).reshape(2, 2)
    a, b, d = c[0, 0], 0.5 * (c[0, 1] + c[1, 0]), c[1, 1]
    mean = 0.5 * (a + d)
    radius = math.hypot(0.5 * (a - d), b)
    lam1, lam2 = mean + radius, mean - radius
    if radius < 1e-15 or abs(b) < 1e-15:
        axis = np.array([1.0, 0.0]) if a >= d else np.array([0.0, 1.0])
    else:
        axis = np.array([lam1 - d, b])
        axis /= np.linalg.norm(axis)
    return lam1, lam2, axis


def marginalize(hypotheses: list[tuple[SampleGrid, CombinedWeights]]) -> CorrespondenceUncertainty:
    """Pool every hypothesis's weighted grid points into one mean/covariance.

    Each point's pooled weight is its combined density value times its
    quadrature cell measure, so the sums behave like envelope integrals and
    hypotheses with different envelope sizes mix by probability mass.
    """
    if not hypotheses:
        raise MarginalizationFailedError("no hypotheses to marginalize")
    pts = []
    wts = []
    for grid, combined in hypotheses:
        keep = combined.weights > 0.0
        if int(keep.sum()) < 4:
            raise MarginalizationFailedError("a hypothesis has fewer than 4 weighted points")
        pts.append(grid.points[keep])
        wts.append(combined.weights[keep] * grid.quad_weights[keep])
    points = np.vstack(pts)
    weights = np.concatenate(wts)
    total = float(weights.sum())
    if not math.isfinite(total) or total <= 1e-300:
        raise MarginalizationFailedError(f"total weight {total:.3e} unusable")
    w = weights / total
    mean = w @ points
    diff = points - mean
    sxx = float(np.sum(w * diff[:, 0] * diff[:, 0]))
    sxy = float(np.sum(w * diff[:, 0] * diff[:, 1]))
    syy = float(np.sum(w * diff[:, 1] * diff[:, 1]))
    cov = symmetrize_floor(np.array([[sxx, sxy], [sxy, syy]]))
    return CorrespondenceUncertainty(mean, cov, len(hypotheses))


def prepare_hypotheses(
    query: CorrespondenceQuery, config: EstimatorConfig, seed: int | None = None
) -> list[Hypothesis]:
    """Run guidance sampling, calibration, patch errors and fitting.

    Individual hypothesis failures (grid at the border, unusable patches,
    no fit sign change) degrade gracefully: the hypothesis is dropped or
    falls back to guidance-only weights.  An empty return means the caller
    should report the visual point with the fallback covariance.
    """
    gcfg, ecfg = config.guidance, config.energy
    if seed is None:
        seed = config.seed

    pure_visual = False
    points: list[GuidancePoint] = []
    depth = query.depth
    if depth is None:
        try:
            depth = triangulate(query.camera, query.rel_pose, query.x_ref, query.x_v)
        except TriangulationDegenerateError:
            pure_visual = True
    if not pure_visual:
        try:
            depths = sample_depths(depth, gcfg, seed)
            points = sample_guidance_points(
                query.camera, query.rel_pose, query.x_ref, query.x_v, depths, gcfg
            )
        except NoGuidanceError:
            pure_visual = True
    if pure_visual:
        # symmetric prior centered on the visual point
        points = [GuidancePoint(query.x_v.copy(), False, math.nan)]

    ref_centers = query.reference_centers()
    bounds = (query.tgt_image.width, query.tgt_image.height)
    hypotheses: list[Hypothesis] = []
    for point in points:
        model = calibrate_guidance(query.x_v, point, gcfg)
        try:
            grid = build_grid(model, gcfg, bounds)
            fld = compute_patch_error_field(
                query.ref_image, query.tgt_image, ref_centers, query.x_v, grid, ecfg
            )
        except (GridDegenerateError, PatchOutOfBoundsError):
            continue
        if fld.valid_count < 4:
            continue
        try:
            scaled = fit_energy_scale(fld, model, gcfg, ecfg)
        except EnergyFitError:
            # keep the hypothesis on guidance-only terms
            densities = np.zeros_like(fld.errors)
            densities[fld.valid_mask] = guidance_density(model, query.x_v, gcfg)
            scaled = ScaledEnergy(1.0, densities, True)
        combined = combine_energies(scaled, model, fld, gcfg, ecfg)
        hypotheses.append(Hypothesis(point, model, grid, fld, scaled, combined))
    return hypotheses


def _fallback(query: CorrespondenceQuery, config: EstimatorConfig) -> CorrespondenceUncertainty:
    var = config.fusion.fallback_sigma**2
    return CorrespondenceUncertainty(query.x_v.copy(), np.diag([var, var]), 0)


def estimate_correspondence(
    query: CorrespondenceQuery, config: EstimatorConfig, seed: int | None = None
) -> CorrespondenceUncertainty:
    """Full per-correspondence pipeline: guidance, energies, marginalization."""
    hypotheses = prepare_hypotheses(query, config, seed)
    if not hypotheses:
        return _fallback(query, config)
    try:
        result = marginalize([(h.grid, h.combined) for h in hypotheses])
    except MarginalizationFailedError:
        return _fallback(query, config)
    diags = tuple(
        HypothesisDiagnostics(h.scaled.k_star, h.combined.lam, h.point.clipped, h.scaled.degenerate)
        for h in hypotheses
    )
    return replace(result, diagnostics=diags)


def start_track(
    track_id: int, frame: int, estimate: CorrespondenceUncertainty, visual: np.ndarray
) -> TrackState:
    """First observation: the pair covariance is taken as-is."""
    return TrackState(
        track_id=track_id,
        latest_mean=np.asarray(estimate.mean, dtype=np.float64).copy(),
        latest_covariance=np.asarray(estimate.covariance, dtype=np.float64).copy(),
        latest_visual=np.asarray(visual, dtype=np.float64).reshape(2).copy(),
        first_frame=frame,
        latest_frame=frame,
        accumulated_covariance=np.asarray(estimate.covariance, dtype=np.float64).copy(),
    )


def propagate_track(
    state: TrackState,
    new_estimate: CorrespondenceUncertainty,
    frame: int,
    visual: np.ndarray,
    mode: str = "single_sample",
) -> TrackState:
    """Carry a track's uncertainty to the next image pair.

    Per-pair drift is treated as independent, so accumulated covariance is
    the running sum.  ``mode`` chooses the reference points used for the
    next pair (see :func:`next_reference_points`).
    """
    if mode not in ("single_sample", "with_visual"):
        raise InputError(f"unknown propagation mode {mode!r}")
    return TrackState(
        track_id=state.track_id,
        latest_mean=np.asarray(new_estimate.mean, dtype=np.float64).copy(),
        latest_covariance=np.asarray(new_estimate.covariance, dtype=np.float64).copy(),
        latest_visual=np.asarray(visual, dtype=np.float64).reshape(2).copy(),
        first_frame=state.first_frame,
        latest_frame=frame,
        accumulated_covariance=state.accumulated_covariance + new_estimate.covariance,
    )


def next_reference_points(state: TrackState, mode: str) -> tuple[np.ndarray, tuple]:
    """(primary reference point, extra reference centers) for the next pair.

    single_sample: track from the corrected mean only.
    with_visual: average patch errors over patches at the corrected mean and
    at the visual point of the latest observation.
    """
    if mode == "single_sample":
        return state.latest_mean, ()
    if mode == "with_visual":
        if np.array_equal(state.latest_mean, state.latest_visual):
            return state.latest_mean, ()
        return state.latest_mean, (state.latest_visual,)
    raise InputError(f"unknown propagation mode {mode!r}")


@dataclass(frozen=True)
class FrameNormalization:
    scale: float
    mean_det: float
    skipped: bool


def normalize_frame(
    uncertainties: list[CorrespondenceUncertainty],
    target_det: float,
    det_floor: float = 1e-17,
) -> tuple[list[CorrespondenceUncertainty], FrameNormalization]:
    """Rescale one image's covariances so their average determinant matches.

    Every covariance is multiplied by the same scalar s with s^2 =
    target_det / mean(det); means are untouched.  A frame whose mean
    determinant is at or below ``det_floor`` is returned unscaled and
    flagged.
    """
    if not uncertainties:
        raise InputError("normalize_frame needs at least one uncertainty")
    dets = [float(np.linalg.det(u.covariance)) for u in uncertainties]
    if not all(math.isfinite(d) for d in dets):
        raise InputError("non-finite covariance determinant")
    mean_det = sum(dets) / len(dets)
    if mean_det <= det_floor:
        return list(uncertainties), FrameNormalization(1.0, mean_det, True)
    s = math.sqrt(target_det / mean_det)
    scaled = [replace(u, covariance=u.covariance * s) for u in uncertainties]
    return scaled, FrameNormalization(s, mean_det, False)
