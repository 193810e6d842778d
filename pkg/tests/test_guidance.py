import math

import numpy as np
import pytest
from scipy import integrate

from featuncert.errors import (
    ConfigurationError,
    GridDegenerateError,
    InputError,
    NoGuidanceError,
)
from featuncert.geometry import RelativePose, relative_pose
from featuncert.guidance import (
    GuidanceConfig,
    GuidanceModel,
    GuidancePoint,
    build_grid,
    calibrate_guidance,
    grid_extents,
    guidance_density,
    guidance_density_many,
    sample_depths,
    sample_guidance_points,
)
from conftest import make_pose

DEFAULTS = GuidanceConfig()


def make_model(x_v, x_g, config):
    return calibrate_guidance(np.asarray(x_v, float), GuidancePoint(np.asarray(x_g, float), False, 1.0), config)


def quad_z_oracle(alpha, beta, dist):
    """Independent normalization: adaptive 1D quadratures of the axis factors."""
    span = 50.0 / alpha

    def axis1(u):
        return math.exp(-alpha * (beta * abs(u) + (1 - beta) * abs(u - dist)))

    i1, _ = integrate.quad(axis1, -span, dist + span, points=[0.0, dist], limit=200)
    i2, _ = integrate.quad(lambda v: math.exp(-alpha * abs(v)), -span, span, points=[0.0], limit=200)
    return i1 * i2


class TestConfig:
    def test_field_validation(self):
        with pytest.raises(ConfigurationError):
            GuidanceConfig(alpha=0.0)
        with pytest.raises(ConfigurationError):
            GuidanceConfig(r_max=0.5)
        with pytest.raises(ConfigurationError):
            GuidanceConfig(n=0)

    def test_grid_positivity_validated_at_construction(self):
        # d_max large enough that l0 - (1-beta)*D goes negative
        with pytest.raises(ConfigurationError):
            GuidanceConfig(alpha=0.89, r_max=3.0, d_max=8.0, l0=1.0)

    def test_default_config_valid(self):
        GuidanceConfig()


class TestSampleDepths:
    def test_single_guidance_is_mean(self):
        cfg = GuidanceConfig(num_guidance=1)
        assert sample_depths(2.0, cfg, 0) == [2.0]

    def test_zero_sigma(self):
        cfg = GuidanceConfig(num_guidance=5, depth_sigma_ratio=0.0)
        assert sample_depths(3.0, cfg, 1) == [3.0] * 5

    def test_monte_carlo_std(self):
        cfg = GuidanceConfig(num_guidance=100001, depth_sigma_ratio=0.1)
        draws = np.array(sample_depths(2.0, cfg, 42)[1:])
        assert abs(draws.std() - 0.2) < 0.004  # 2%
        assert abs(draws.mean() - 2.0) < 0.01
        assert draws.min() > 0

    def test_deterministic(self):
        cfg = GuidanceConfig(num_guidance=10)
        assert sample_depths(2.0, cfg, 7) == sample_depths(2.0, cfg, 7)
        assert sample_depths(2.0, cfg, 7) != sample_depths(2.0, cfg, 8)

    def test_nonpositive_mean(self):
        with pytest.raises(InputError):
            sample_depths(0.0, DEFAULTS, 0)


class TestSampleGuidancePoints:
    def test_identity_motion(self, camera):
        pts = sample_guidance_points(
            camera, RelativePose.identity(), [40.0, 41.0], [40.0, 41.0], [1.0, 2.0, 3.0], DEFAULTS
        )
        assert len(pts) == 3
        for p in pts:
            assert np.abs(p.position - [40.0, 41.0]).max() < 1e-12
            assert not p.clipped

    def test_clip_relocation(self, camera):
        # vector-arithmetic oracle: reprojection 10 px right of x_v clips to
        # d_max along the same direction
        tgt = make_pose(position=(-0.2, 0.0, 0.0))  # +10 px disparity at depth 2
        rel = relative_pose(make_pose(), tgt)
        x_ref = np.array([50.0, 50.0])
        pts = sample_guidance_points(camera, rel, x_ref, x_ref, [2.0], DEFAULTS)
        assert len(pts) == 1
        assert pts[0].clipped
        assert np.abs(pts[0].position - [53.0, 50.0]).max() < 1e-9
        assert abs(np.linalg.norm(pts[0].position - x_ref) - DEFAULTS.d_max) < 1e-9

    def test_behind_camera_dropped(self, camera):
        tgt = make_pose(position=(0.0, 0.0, 2.5))
        rel = relative_pose(make_pose(), tgt)
        pts = sample_guidance_points(camera, rel, [50.0, 50.0], [50.0, 50.0], [2.0, 3.0, 4.0], DEFAULTS)
        assert len(pts) == 2  # depth 2.0 lands behind the target camera

    def test_all_dropped_raises(self, camera):
        tgt = make_pose(position=(0.0, 0.0, 10.0))
        rel = relative_pose(make_pose(), tgt)
        with pytest.raises(NoGuidanceError):
            sample_guidance_points(camera, rel, [50.0, 50.0], [50.0, 50.0], [1.0, 2.0], DEFAULTS)

    def test_epipolar_candidate_appended(self, camera):
        cfg = GuidanceConfig(epipolar_candidate=True)
        tgt = make_pose(position=(0.1, 0.0, 0.0))
        rel = relative_pose(make_pose(), tgt)
        x_v = np.array([46.0, 51.0])
        pts = sample_guidance_points(camera, rel, [50.0, 50.0], x_v, [2.0], cfg)
        assert len(pts) == 2
        assert math.isnan(pts[-1].source_depth)
        # epipolar line is y = 50; nearest point keeps x, snaps y
        assert abs(pts[-1].position[1] - 50.0) < 1e-9


class TestCalibration:
    def test_beta_at_clip_distance(self):
        # hand-solved ratio condition: beta = 1/2 + ln(3)/(2*0.89*3)
        model = make_model([50, 50], [53, 50], DEFAULTS)
        expected = 0.5 + math.log(3.0) / (2.0 * 0.89 * 3.0)
        assert abs(model.beta - expected) < 1e-12
        assert abs(model.beta - 0.7057) < 1e-4

    def test_beta_zero_distance_limit(self):
        model = make_model([50, 50], [50, 50], DEFAULTS)
        expected = 0.5 + (3.0 - 1.0) / (2.0 * 0.89 * 3.0)
        assert abs(model.beta - expected) < 1e-12
        assert abs(model.beta - 0.8745) < 1e-4
        # continuity: evaluating just off zero agrees with the limit value
        near = make_model([50, 50], [50 + 1e-9, 50], DEFAULTS)
        assert abs(near.beta - model.beta) < 1e-6

    def test_density_ratio_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = rng.uniform(0.0, DEFAULTS.d_max)
            ang = rng.uniform(0, 2 * math.pi)
            x_v = rng.uniform(20, 80, size=2)
            x_g = x_v + d * np.array([math.cos(ang), math.sin(ang)])
            model = make_model(x_v, x_g, DEFAULTS)
            q_v = guidance_density(model, x_v, DEFAULTS)
            q_g = guidance_density(model, x_g, DEFAULTS)
            assert abs(q_v - DEFAULTS.ratio_at(model.dist) * q_g) < 1e-9

    def test_invalid_combination_rejected(self):
        # tiny alpha pushes beta above 1 at small separations
        cfg = GuidanceConfig(alpha=0.2, r_max=3.0, d_max=3.0, l0=3.0)
        with pytest.raises(ConfigurationError):
            make_model([50, 50], [50.5, 50], cfg)
        # ratio cap 1 gives beta exactly 1/2, outside (1/2, 1]
        flat = GuidanceConfig(alpha=0.89, r_max=1.0, d_max=3.0, l0=2.0)
        with pytest.raises(ConfigurationError):
            make_model([50, 50], [51, 50], flat)


class TestNormalization:
    def test_closed_form_vs_1d_quadrature(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            alpha = rng.uniform(0.3, 1.2)
            beta = rng.uniform(0.55, 0.99)
            dist = rng.uniform(0.0, 5.0)
            model = GuidanceModel(
                np.zeros(2), np.array([dist, 0.0]), np.eye(2), dist, beta, 1.0
            )
            cfg_alpha = alpha
            from featuncert.guidance import _axis1_integral

            closed = _axis1_integral(alpha, beta, dist) * 2.0 / alpha
            oracle = quad_z_oracle(alpha, beta, dist)
            assert abs(closed - oracle) / oracle < 1e-6

    def test_closed_form_vs_2d_quadrature(self):
        # nested adaptive quadrature over the plane, split at the density
        # ridges so the integrator sees smooth pieces
        rng = np.random.default_rng(6)
        from featuncert.guidance import _axis1_integral

        for _ in range(100):
            alpha = rng.uniform(0.3, 1.2)
            beta = rng.uniform(0.55, 0.99)
            dist = rng.uniform(0.0, 5.0)
            span = 45.0 / alpha

            def psi(u, v):
                return beta * (abs(u) + abs(v)) + (1 - beta) * (abs(u - dist) + abs(v))

            def inner(u):
                val, _ = integrate.quad(
                    lambda v: math.exp(-alpha * psi(u, v)), -span, span, points=[0.0], limit=100
                )
                return val

            oracle = 0.0
            for a, b in ((-span, 0.0), (0.0, dist), (dist, dist + span)):
                if b > a:
                    seg, _ = integrate.quad(inner, a, b, limit=200, epsabs=1e-11, epsrel=1e-9)
                    oracle += seg
            closed = _axis1_integral(alpha, beta, dist) * 2.0 / alpha
            assert abs(closed - oracle) / oracle < 1e-6

    def test_density_integrates_to_one(self):
        for d in (0.0, 1.2, 2.9):
            model = make_model([50.0, 50.0], [50.0 + d, 50.0], DEFAULTS)
            span = 40.0 / DEFAULTS.alpha
            total, _ = integrate.dblquad(
                lambda y, x: guidance_density(model, [x, y], DEFAULTS),
                50.0 - span,
                50.0 + d + span,
                50.0 - span,
                50.0 + span,
                epsabs=1e-8,
                epsrel=1e-6,
            )
            assert abs(total - 1.0) < 1e-3

    def test_peak_value_at_zero_distance(self):
        model = make_model([50, 50], [50, 50], DEFAULTS)
        q_v = guidance_density(model, [50, 50], DEFAULTS)
        assert abs(q_v * model.z_norm - 1.0) < 1e-12
        assert abs(model.z_norm - 4.0 / DEFAULTS.alpha**2) < 1e-12


class TestGrid:
    bounds = (101, 101)

    def test_square_grid_offsets(self):
        model = make_model([50.0, 50.0], [50.0, 50.0], DEFAULTS)
        grid = build_grid(model, DEFAULTS, self.bounds)
        expected = np.array([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0])
        xs = np.unique(np.round(grid.points[:, 0] - 50.0, 12))
        ys = np.unique(np.round(grid.points[:, 1] - 50.0, 12))
        assert np.abs(xs - expected).max() < 1e-9
        assert np.abs(ys - expected).max() < 1e-9
        assert grid.quad_weights.sum() == pytest.approx(grid.w_extent * grid.h_extent, rel=1e-12)

    def test_skewed_grid_span(self):
        # manual model: separation 0.5 with visual weight 0.88
        model = GuidanceModel(np.array([50.0, 50.0]), np.array([50.5, 50.0]), np.eye(2), 0.5, 0.88, 1.0)
        grid = build_grid(model, DEFAULTS, self.bounds)
        assert abs(grid.l - 0.94) < 1e-12
        u = grid.points[:, 0] - 50.0
        assert abs(u.min() + 0.94) < 1e-9
        assert abs(u.max() - 1.06) < 1e-9
        v = grid.points[:, 1] - 50.0
        assert abs(v.min() + 0.94) < 1e-9 and abs(v.max() - 0.94) < 1e-9

    def test_shrinking_branch(self):
        cfg = DEFAULTS
        dist = 2.0
        model = make_model([50.0, 50.0], [52.0, 50.0], cfg)
        assert dist >= cfg.l0 / model.beta
        l, w, h = grid_extents(model, cfg)
        assert abs(w - 2.0 * model.beta * l / (2.0 * model.beta - 1.0)) < 1e-12
        assert w < 2.0 * cfg.l0

    def test_branch_switch_continuous(self):
        cfg = DEFAULTS
        for eps in (-1e-9, 1e-9):
            pass
        # solve D = l0/beta(D) numerically, then compare W on both sides
        d = 1.0
        for _ in range(200):
            d = cfg.l0 / cfg.beta_at(d)
        for eps, _ in ((-1e-7, None), (1e-7, None)):
            model = make_model([50.0, 50.0], [50.0 + d + eps, 50.0], cfg)
            _, w, _ = grid_extents(model, cfg)
            assert abs(w - 2.0 * cfg.l0) < 1e-5

    def test_monotone_extents(self):
        cfg = DEFAULTS
        dists = np.linspace(0.0, cfg.d_max, 200)
        near = []
        far = []
        for d in dists:
            model = make_model([50.0, 50.0], [50.0 + d, 50.0], cfg)
            l, w, _ = grid_extents(model, cfg)
            near.append(l)
            far.append(w - l)
        near = np.array(near)
        assert np.all(np.diff(near) < 0)
        far = np.array(far)
        optimistic = dists < cfg.l0 / np.array([cfg.beta_at(d) for d in dists])
        assert np.all(np.diff(far[optimistic]) > 0)

    def test_level_set_contour_inside_envelope(self):
        # the density level set at exp(-alpha*l0) stays inside the envelope
        # while the guidance point is close enough not to shrink the grid
        cfg = DEFAULTS
        for d in np.linspace(0.0, cfg.l0 / cfg.beta_at(0.0) - 1e-6, 8):
            model = make_model([50.0, 50.0], [50.0 + d, 50.0], cfg)
            if model.dist >= cfg.l0 / model.beta:
                continue
            l, w, _ = grid_extents(model, cfg)
            for ang in np.linspace(0, 2 * math.pi, 720, endpoint=False):
                direction = np.array([math.cos(ang), math.sin(ang)])
                lo, hi = 0.0, 20.0
                for _ in range(60):  # bisect psi(t) = l0 along the ray
                    mid = 0.5 * (lo + hi)
                    pt = np.array([50.0, 50.0]) + mid * direction
                    u, v = model.to_local(pt.reshape(1, 2))[0]
                    psi = model.beta * (abs(u) + abs(v)) + (1 - model.beta) * (abs(u - model.dist) + abs(v))
                    if psi < cfg.l0:
                        lo = mid
                    else:
                        hi = mid
                pt = np.array([50.0, 50.0]) + 0.5 * (lo + hi) * direction
                u, v = model.to_local(pt.reshape(1, 2))[0]
                assert -l - 1e-9 <= u <= w - l + 1e-9
                assert abs(v) <= l + 1e-9

    def test_envelope_contains_visual_point(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            d = rng.uniform(0, DEFAULTS.d_max)
            model = make_model([50.0, 50.0], [50.0 + d, 50.0], DEFAULTS)
            l, w, _ = grid_extents(model, DEFAULTS)
            assert -l <= 0.0 <= w - l

    def test_border_masking_and_degenerate(self):
        model = make_model([0.5, 50.0], [0.5, 50.0], DEFAULTS)
        grid = build_grid(model, DEFAULTS, self.bounds)
        assert not grid.in_bounds_mask.all()
        assert grid.in_bounds_mask.sum() >= 4
        edge_model = make_model([0.9, 0.9], [0.9, 0.9], DEFAULTS)
        with pytest.raises(GridDegenerateError):
            build_grid(edge_model, DEFAULTS, (2, 2))

    def test_clip_bound_invariant(self, camera):
        rng = np.random.default_rng(12)
        for _ in range(30):
            tgt = make_pose(position=rng.normal(scale=0.15, size=3) * [1, 1, 0.2])
            rel = relative_pose(make_pose(), tgt)
            x_v = np.array([50.0, 50.0]) + rng.uniform(-2, 2, size=2)
            try:
                pts = sample_guidance_points(camera, rel, [50.0, 50.0], x_v, [2.0, 2.4], DEFAULTS)
            except NoGuidanceError:
                continue
            for p in pts:
                assert np.linalg.norm(p.position - x_v) <= DEFAULTS.d_max + 1e-9


class TestDensity:
    def test_rotated_frame_alignment(self):
        # guidance point off-axis: axis 1 of the model frame points at it
        model = make_model([50.0, 50.0], [51.0, 52.0], DEFAULTS)
        local = model.to_local(np.array([[51.0, 52.0]]))[0]
        assert abs(local[0] - model.dist) < 1e-12
        assert abs(local[1]) < 1e-12

    def test_density_many_matches_scalar(self):
        model = make_model([50.0, 50.0], [51.5, 50.5], DEFAULTS)
        rng = np.random.default_rng(3)
        pts = rng.uniform(45, 55, size=(20, 2))
        many = guidance_density_many(model, pts, DEFAULTS)
        for p, v in zip(pts, many):
            assert abs(guidance_density(model, p, DEFAULTS) - v) < 1e-15
