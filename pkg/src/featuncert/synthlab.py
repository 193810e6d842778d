"""Synthetic scenes with exact ground truth, plus brute-force references.

A scene is a textured plane at constant world z observed by pinhole cameras.
Rendering casts rays through supersampled pixel positions, evaluates a
procedural texture at the plane intersection, and then applies controlled
degradation (gaussian blur, motion blur, intensity noise).  Because the
geometry is analytic, the true corresponding pixel of every feature is known
exactly in every view, which is what the estimator's accuracy is measured
against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .energy import ImagePlane, patch_offsets
from .errors import InputError, PatchOutOfBoundsError
from .fusion import (
    CorrespondenceQuery,
    CorrespondenceUncertainty,
    EstimatorConfig,
    prepare_hypotheses,
)
from .geometry import CameraModel, Pose, backproject, project
from .guidance import grid_extents, guidance_density, guidance_density_many


# --------------------------------------------------------------------------
# procedural textures


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1); portable integer mixing."""
    x = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    x ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
    x ^= np.uint64((seed * 0x165667B19E3779F9) & 0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(33)
    x *= np.uint64(0xFF51AFD7ED558CCD)
    x ^= x >> np.uint64(33)
    return x.astype(np.float64) / float(2**64)


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _value_noise(u: np.ndarray, v: np.ndarray, seed: int, scale: float, octaves: int) -> np.ndarray:
    """Band-limited value noise in [-1, 1]."""
    out = np.zeros_like(u)
    amp_total = 0.0
    amp = 1.0
    freq = 1.0 / scale
    for octave in range(octaves):
        uu = u * freq
        vv = v * freq
        i0 = np.floor(uu)
        j0 = np.floor(vv)
        fu = _fade(uu - i0)
        fv = _fade(vv - j0)
        i0 = i0.astype(np.int64)
        j0 = j0.astype(np.int64)
        s = seed + 101 * octave
        h00 = _hash01(i0, j0, s)
        h01 = _hash01(i0 + 1, j0, s)
        h10 = _hash01(i0, j0 + 1, s)
        h11 = _hash01(i0 + 1, j0 + 1, s)
        top = h00 * (1 - fu) + h01 * fu
        bot = h10 * (1 - fu) + h11 * fu
        out += amp * (2.0 * (top * (1 - fv) + bot * fv) - 1.0)
        amp_total += amp
        amp *= 0.5
        freq *= 2.0
    return out / amp_total


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class TextureComponent:
    """One additive texture term on the plane.

    kind "noise": band-limited value noise (params: seed, scale, octaves).
    kind "edge": smooth step across the line cos(a)*u + sin(a)*v = offset.
    kind "corner": product of two perpendicular smooth steps.
    All contribute amplitude * (profile - centering) around the 0.5 base.
    """

    kind: str
    amplitude: float
    angle: float = 0.0
    offset: float = 0.0
    offset2: float = 0.0
    width: float = 0.05
    seed: int = 0
    scale: float = 0.25
    octaves: int = 3

    def evaluate(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.kind == "noise":
            return self.amplitude * _value_noise(u, v, self.seed, self.scale, self.octaves)
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        s1 = ca * u + sa * v - self.offset
        if self.kind == "edge":
            return self.amplitude * (_smoothstep(0.5 * (s1 / self.width + 1.0)) - 0.5) * 2.0
        if self.kind == "corner":
            s2 = -sa * u + ca * v - self.offset2
            p1 = _smoothstep(0.5 * (s1 / self.width + 1.0))
            p2 = _smoothstep(0.5 * (s2 / self.width + 1.0))
            return self.amplitude * 2.0 * (p1 * p2 - 0.25)
        raise InputError(f"unknown texture kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "amplitude": self.amplitude,
            "angle": self.angle,
            "offset": self.offset,
            "offset2": self.offset2,
            "width": self.width,
            "seed": self.seed,
            "scale": self.scale,
            "octaves": self.octaves,
        }

    @staticmethod
    def from_dict(d: dict) -> "TextureComponent":
        return TextureComponent(**d)


def evaluate_texture(components: tuple[TextureComponent, ...], u: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = np.full_like(np.asarray(u, dtype=np.float64), 0.5)
    for comp in components:
        out = out + comp.evaluate(u, v)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class DegradationParams:
    gaussian_blur_sigma: float = 0.0  # px
    intensity_noise_sigma: float = 0.0  # [0, 1] intensity units
    motion_blur_length: float = 0.0  # px
    motion_blur_angle: float = 0.0  # radians, image plane

    def __post_init__(self):
        if min(self.gaussian_blur_sigma, self.intensity_noise_sigma, self.motion_blur_length) < 0:
            raise InputError("degradation parameters must be >= 0")


@dataclass(frozen=True)
class SyntheticScene:
    camera: CameraModel
    poses: tuple[Pose, ...]
    timestamps: tuple[float, ...]
    plane_z: float
    texture: tuple[TextureComponent, ...]
    features: np.ndarray  # (k, 3) world points on the plane
    seed: int = 0

    def __post_init__(self):
        feats = np.ascontiguousarray(np.atleast_2d(self.features), dtype=np.float64)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if len(self.timestamps) != len(self.poses):
            raise InputError("one timestamp per pose required")
        for pose in self.poses:
            for k in range(feats.shape[0]):
                z = (pose.rotation.T @ (feats[k] - pose.position))[2]
                if z <= 0:
                    raise InputError(f"feature {k} behind camera in one of the views")


def true_pixel(scene: SyntheticScene, pose_index: int, feature_index: int) -> np.ndarray | None:
    """Exact projection of a feature, or None when it leaves the image."""
    pose = scene.poses[pose_index]
    p_cam = pose.rotation.T @ (scene.features[feature_index] - pose.position)
    if p_cam[2] <= 0:
        return None
    pix = project(scene.camera, p_cam)
    cam = scene.camera
    if not (0.0 <= pix[0] <= cam.width - 1 and 0.0 <= pix[1] <= cam.height - 1):
        return None
    return pix


def render_view(
    scene: SyntheticScene,
    pose_index: int,
    degradation: DegradationParams = DegradationParams(),
    supersample: int = 3,
) -> tuple[ImagePlane, dict[int, np.ndarray]]:
    """Render one view and return it with the exact feature correspondences.

    Supersampling averages the texture over a sub-pixel lattice before any
    degradation; blur and noise are applied to the projected image, so the
    returned true correspondences are unaffected by them.
    """
    cam = scene.camera
    pose = scene.poses[pose_index]
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    xs = np.arange(cam.width, dtype=np.float64)
    ys = np.arange(cam.height, dtype=np.float64)
    img = np.zeros((cam.height, cam.width))
    r = pose.rotation
    c = pose.position
    for oy in sub:
        for ox in sub:
            nx = (xs[None, :] + ox - cam.cx) / cam.fx
            ny = (ys[:, None] + oy - cam.cy) / cam.fy
            dir_w = (
                r[:, 0][:, None, None] * nx[None, :, :]
                + r[:, 1][:, None, None] * ny[None, :, :]
                + r[:, 2][:, None, None]
            )
            if np.any(dir_w[2] <= 1e-12) and scene.plane_z > c[2]:
                raise InputError("camera ray parallel to or away from the plane")
            t = (scene.plane_z - c[2]) / dir_w[2]
            pu = c[0] + t * dir_w[0]
            pv = c[1] + t * dir_w[1]
            img += evaluate_texture(scene.texture, pu, pv)
    img /= supersample * supersample

    if degradation.gaussian_blur_sigma > 0:
        img = ndimage.gaussian_filter(img, degradation.gaussian_blur_sigma, mode="nearest")
    if degradation.motion_blur_length > 0:
        taps = max(3, int(math.ceil(degradation.motion_blur_length * 4)) | 1)
        span = np.linspace(-0.5, 0.5, taps) * degradation.motion_blur_length
        ca, sa = math.cos(degradation.motion_blur_angle), math.sin(degradation.motion_blur_angle)
        acc = np.zeros_like(img)
        for s in span:
            acc += ndimage.shift(img, (s * sa, s * ca), order=1, mode="nearest")
        img = acc / taps
    if degradation.intensity_noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence((scene.seed, pose_index, 977)))
        img = img + rng.normal(0.0, degradation.intensity_noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    truths: dict[int, np.ndarray] = {}
    for k in range(scene.features.shape[0]):
        pix = true_pixel(scene, pose_index, k)
        if pix is not None:
            truths[k] = pix
    return ImagePlane(img), truths


# --------------------------------------------------------------------------
# reference matcher and brute-force oracle


def visual_match(
    ref_image: ImagePlane,
    tgt_image: ImagePlane,
    x_ref: np.ndarray,
    search_radius: float,
    step: float = 0.25,
    patch_half: int = 5,
) -> np.ndarray:
    """Exhaustive patch-RMSE minimizer over a square search window.

    Ties are broken toward the smallest displacement, then lexicographically
    by (dx, dy); with identical images this returns x_ref itself.
    """
    x_ref = np.asarray(x_ref, dtype=np.float64).reshape(2)
    k = int(round(search_radius / step))
    offs = (np.arange(2 * k + 1) - k) * step
    dx, dy = np.meshgrid(offs, offs)
    dx = dx.ravel()
    dy = dy.ravel()
    candidates = np.column_stack([x_ref[0] + dx, x_ref[1] + dy])

    offsets = patch_offsets(patch_half)
    lo = candidates.min(axis=0) + offsets.min(axis=0)
    hi = candidates.max(axis=0) + offsets.max(axis=0)
    if lo[0] < 0 or lo[1] < 0 or hi[0] > tgt_image.width - 1 or hi[1] > tgt_image.height - 1:
        raise PatchOutOfBoundsError("search window (with patch margin) exits the target image")
    ref_lo = x_ref + offsets.min(axis=0)
    ref_hi = x_ref + offsets.max(axis=0)
    if ref_lo[0] < 0 or ref_lo[1] < 0 or ref_hi[0] > ref_image.width - 1 or ref_hi[1] > ref_image.height - 1:
        raise PatchOutOfBoundsError("reference patch exits the reference image")

    ref_patch = kernels.bilinear_many(
        ref_image.intensities, x_ref[0] + offsets[:, 0], x_ref[1] + offsets[:, 1]
    )
    rmse = kernels.patch_rmse_from_ref(tgt_image.intensities, ref_patch, candidates, offsets)
    order = np.lexsort((dy, dx, dx * dx + dy * dy, rmse))
    return candidates[order[0]]


def dense_moments(points: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of a weighted point cloud by direct summation."""
    w = weights / weights.sum()
    mean = w @ points
    diff = points - mean
    cov = np.array(
        [
            [np.sum(w * diff[:, 0] ** 2), np.sum(w * diff[:, 0] * diff[:, 1])],
            [np.sum(w * diff[:, 0] * diff[:, 1]), np.sum(w * diff[:, 1] ** 2)],
        ]
    )
    return mean, cov


def dense_oracle(
    query: CorrespondenceQuery,
    config: EstimatorConfig,
    grid_step: float = 0.05,
    seed: int | None = None,
    envelope_pad: float = 1.0,
) -> CorrespondenceUncertainty:
    """Brute-force moments of the same combined density the estimator uses.

    Runs the identical guidance/fit pipeline, then evaluates each
    hypothesis's combined density on a dense pixel lattice over the union of
    the hypothesis envelopes (padded), summing the results directly.  Used
    to validate the sparse-grid marginalization.
    """
    if grid_step > 0.1:
        raise InputError("oracle grid step must be <= 0.1 px")
    hyps = prepare_hypotheses(query, config, seed)
    if not hyps:
        var = config.fusion.fallback_sigma**2
        return CorrespondenceUncertainty(query.x_v.copy(), np.diag([var, var]), 0)

    gcfg = config.guidance
    los, his = [], []
    for h in hyps:
        l, w, _ = grid_extents(h.model, gcfg)
        corners_local = np.array([[-l, -l], [w - l, -l], [w - l, l], [-l, l]])
        corners = h.model.to_image(corners_local)
        los.append(corners.min(axis=0))
        his.append(corners.max(axis=0))
    lo = np.min(los, axis=0) - envelope_pad
    hi = np.max(his, axis=0) + envelope_pad
    lo = np.maximum(lo, 0.0)
    hi = np.minimum(hi, [query.tgt_image.width - 1, query.tgt_image.height - 1])
    xs = np.arange(lo[0], hi[0] + grid_step * 0.5, grid_step)
    ys = np.arange(lo[1], hi[1] + grid_step * 0.5, grid_step)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])

    # patch errors are hypothesis-independent: evaluate once over the union
    from .energy import patch_errors_at

    errors = patch_errors_at(
        query.ref_image, query.tgt_image, query.reference_centers(), pts, config.energy.patch_half
    )

    total_w = 0.0
    sum_x = np.zeros(2)
    sum_xx = np.zeros((2, 2))
    for h in hyps:
        l, w_ext, _ = grid_extents(h.model, gcfg)
        local = h.model.to_local(pts)
        inside = (
            (local[:, 0] >= -l - 1e-12)
            & (local[:, 0] <= w_ext - l + 1e-12)
            & (np.abs(local[:, 1]) <= l + 1e-12)
        )
        use = inside & np.isfinite(errors)
        if not np.any(use):
            continue
        p = pts[use]
        if h.scaled.degenerate:
            w = guidance_density_many(h.model, p, gcfg)
        else:
            q_v = guidance_density(h.model, h.model.x_v, gcfg)
            e_img = h.scaled.k_star * (errors[use] - h.field.error_at_xv) - math.log(q_v)
            e_dist = gcfg.alpha * (
                h.model.beta * (np.abs(local[use, 0]) + np.abs(local[use, 1]))
                + (1.0 - h.model.beta) * (np.abs(local[use, 0] - h.model.dist) + np.abs(local[use, 1]))
            )
            lam = h.combined.lam
            norm = h.combined.z_image ** (1.0 - lam) * h.model.z_norm**lam
            w = np.exp(np.clip(-((1.0 - lam) * e_img + lam * e_dist), -745.0, 709.0)) / norm
        total_w += float(w.sum())
        sum_x += w @ p
        sum_xx += (p * w[:, None]).T @ p

    if total_w <= 1e-300:
        var = config.fusion.fallback_sigma**2
        return CorrespondenceUncertainty(query.x_v.copy(), np.diag([var, var]), 0)
    mean = sum_x / total_w
    cov = sum_xx / total_w - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    return CorrespondenceUncertainty(mean, cov, len(hyps))


# --------------------------------------------------------------------------
# ready-made scenarios


def _feature_grid(camera: CameraModel, plane_z: float, count: int = 3, margin: float = 0.30) -> np.ndarray:
    """World points on the plane projecting well inside the first view."""
    xs = np.linspace(margin, 1.0 - margin, count)
    pts = []
    for fy in xs:
        for fx in xs:
            pix = np.array([fx * (camera.width - 1), fy * (camera.height - 1)])
            pts.append(backproject(camera, pix, plane_z))
    return np.asarray(pts)


def _default_camera() -> CameraModel:
    return CameraModel(fx=120.0, fy=120.0, cx=47.5, cy=47.5, width=96, height=96)


def make_scenario(name: str, seed: int) -> tuple[SyntheticScene, DegradationParams]:
    """Factory for the named synthetic scenario (deterministic per seed)."""
    builders = {
        "texture": _scenario_texture,
        "blurred-edge": _scenario_blurred_edge,
        "oblique-edge": _scenario_oblique_edge,
        "corner": _scenario_corner,
        "aperture": _scenario_aperture,
        "multi": _scenario_multi,
    }
    if name not in builders:
        raise InputError(f"unknown scenario {name!r}; available: {', '.join(sorted(builders))}")
    return builders[name](seed)


def scene_true_depth(scene: SyntheticScene, pose_index: int, feature_index: int) -> float:
    pose = scene.poses[pose_index]
    return float((pose.rotation.T @ (scene.features[feature_index] - pose.position))[2])


def correspondence_case(
    scene: SyntheticScene,
    degradation: DegradationParams,
    feature_index: int = 0,
    search_radius: float = 3.0,
    use_true_depth: bool = True,
) -> tuple[CorrespondenceQuery, np.ndarray]:
    """Render a two-view case and return (query, true corresponding pixel).

    The visual point comes from the exhaustive matcher on the degraded
    renders; the relative pose is exact (accurate inertial guidance).
    """
    from .geometry import relative_pose

    ref_image, ref_truth = render_view(scene, 0, degradation)
    tgt_image, tgt_truth = render_view(scene, 1, degradation)
    x_ref = ref_truth[feature_index]
    truth = tgt_truth[feature_index]
    x_v = visual_match(ref_image, tgt_image, x_ref, search_radius)
    rel = relative_pose(scene.poses[0], scene.poses[1])
    depth = scene_true_depth(scene, 0, feature_index) if use_true_depth else None
    query = CorrespondenceQuery(x_ref, x_v, ref_image, tgt_image, scene.camera, rel, depth=depth)
    return query, truth


def _motion_poses(
    n: int, step_xyz: tuple[float, float, float], yaw_step: float = 0.0, dt: float = 0.05
) -> tuple[tuple[Pose, ...], tuple[float, ...]]:
    poses = []
    for k in range(n):
        yaw = yaw_step * k
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        p = np.array([step_xyz[0] * k, step_xyz[1] * k, step_xyz[2] * k])
        poses.append(Pose(r, p))
    times = tuple(k * dt for k in range(n))
    return tuple(poses), times


def _scenario_texture(seed: int) -> tuple[SyntheticScene, DegradationParams]:
    cam = _default_camera()
    rng = np.random.default_rng(seed)
    plane_z = 2.0
    texture = (
        TextureComponent("noise", amplitude=0.42, seed=seed, scale=0.22, octaves=3),
        TextureComponent("noise", amplitude=0.08, seed=seed + 7, scale=0.06, octaves=2),
    )
    step = (0.04 + 0.02 * rng.random(), 0.01 * rng.random(), 0.0)
    poses, times = _motion_poses(2, step, yaw_step=math.radians(0.2) * rng.random())
    scene = SyntheticScene(cam, poses, times, plane_z, texture, _feature_grid(cam, plane_z), seed)
    return scene, DegradationParams(gaussian_blur_sigma=0.6, intensity_noise_sigma=0.01)


def _scenario_blurred_edge(seed: int) -> tuple[SyntheticScene, DegradationParams]:
    # corner point near a blurred edge: a strong horizontal edge localizes y
    # while the weak perpendicular arm barely holds x, so the match drifts
    # along the edge; the camera baseline runs along x, so guidance acts
    # exactly along the drift direction
    cam = _default_camera()
    plane_z = 2.0
    rng = np.random.default_rng(seed)
    v0 = 0.02 * (rng.random() - 0.5)
    u0 = 0.03 * (rng.random() - 0.5)
    texture = (
        TextureComponent("edge", amplitude=0.38, angle=math.pi / 2, offset=v0, width=0.030),
        TextureComponent("edge", amplitude=0.04, angle=0.0, offset=u0, width=0.030),
        TextureComponent("noise", amplitude=0.03, seed=seed + 3, scale=0.28, octaves=2),
    )
    poses, times = _motion_poses(2, (0.055, 0.0, 0.0))
    features = np.array([[u0, v0, plane_z]])
    scene = SyntheticScene(cam, poses, times, plane_z, texture, features, seed)
    return scene, DegradationParams(gaussian_blur_sigma=1.4, intensity_noise_sigma=0.025)


def _scenario_oblique_edge(seed: int) -> tuple[SyntheticScene, DegradationParams]:
    # a slanted edge plus noise: anisotropic uncertainty with a clearly
    # nonzero off-diagonal covariance entry, used for oracle comparisons
    cam = _default_camera()
    rng = np.random.default_rng(seed)
    plane_z = 2.0
    sign = 1.0 if rng.random() < 0.5 else -1.0
    angle = sign * math.radians(25.0 + 40.0 * rng.random())
    texture = (
        TextureComponent("edge", amplitude=0.30, angle=angle, offset=0.0, width=0.05),
        TextureComponent("noise", amplitude=0.16, seed=seed + 13, scale=0.20, octaves=3),
    )
    poses, times = _motion_poses(2, (0.04 + 0.02 * rng.random(), 0.01 * rng.random(), 0.0))
    feats = _feature_grid(cam, plane_z).copy()
    ca, sa = math.cos(angle), math.sin(angle)
    d = ca * feats[4, 0] + sa * feats[4, 1]
    feats[4, 0] -= d * ca
    feats[4, 1] -= d * sa
    scene = SyntheticScene(cam, poses, times, plane_z, texture, feats, seed)
    return scene, DegradationParams(gaussian_blur_sigma=1.0, intensity_noise_sigma=0.015)


def _scenario_corner(seed: int) -> tuple[SyntheticScene, DegradationParams]:
    cam = _default_camera()
    plane_z = 2.0
    texture = (
        TextureComponent("corner", amplitude=0.35, angle=0.4, offset=0.0, offset2=0.0, width=0.04),
        TextureComponent("noise", amplitude=0.10, seed=seed + 11, scale=0.2, octaves=2),
    )
    poses, times = _motion_poses(2, (0.05, 0.015, 0.0))
    scene = SyntheticScene(cam, poses, times, plane_z, texture, _feature_grid(cam, plane_z), seed)
    return scene, DegradationParams(gaussian_blur_sigma=0.9, intensity_noise_sigma=0.02)


def _scenario_aperture(seed: int) -> tuple[SyntheticScene, DegradationParams]:
    cam = _default_camera()
    plane_z = 2.0
    texture = (TextureComponent("edge", amplitude=0.40, angle=math.pi / 2, offset=0.0, width=0.025),)
    poses, times = _motion_poses(2, (0.05, 0.0, 0.0))
    feats = _feature_grid(cam, plane_z)
    feats = feats.copy()
    feats[:, 1] = 0.0
    scene = SyntheticScene(cam, poses, times, plane_z, texture, feats, seed)
    return scene, DegradationParams(gaussian_blur_sigma=1.0, intensity_noise_sigma=0.02)


def _scenario_multi(seed: int) -> tuple[SyntheticScene, DegradationParams]:
    cam = _default_camera()
    plane_z = 2.0
    texture = (
        TextureComponent("noise", amplitude=0.40, seed=seed, scale=0.2, octaves=3),
        TextureComponent("noise", amplitude=0.08, seed=seed + 5, scale=0.05, octaves=2),
    )
    poses, times = _motion_poses(4, (0.035, 0.008, 0.0), yaw_step=math.radians(0.15))
    scene = SyntheticScene(cam, poses, times, plane_z, texture, _feature_grid(cam, plane_z), seed)
    return scene, DegradationParams(gaussian_blur_sigma=0.7, intensity_noise_sigma=0.015)
