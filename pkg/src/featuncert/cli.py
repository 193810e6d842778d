"""Command-line interface: estimate, synth, eval, overlay."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import FrameRecord, ResultRow, TrackRow, TruthRow
from .energy import EnergyConfig, ImagePlane
from .errors import DataFormatError, FeatuncertError
from .fusion import (
    CorrespondenceQuery,
    EstimatorConfig,
    FusionConfig,
    estimate_correspondence,
    next_reference_points,
    normalize_frame,
    propagate_track,
    start_track,
)
from .geometry import CameraModel, ImuState, Pose, integrate_imu, relative_pose
from .guidance import GuidanceConfig
from .overlay import write_overlay_svg
from .synthlab import make_scenario, render_view, scene_true_depth, visual_match


@dataclass(frozen=True)
class RunConfig:
    """Estimator parameters plus run-level options and file locations."""

    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    mode: str = "single_sample"  # or "with_visual"
    time_tolerance: float = 0.005  # pose-to-frame matching window (s)
    search_radius: float = 3.0  # matcher radius used by synth fixtures
    frames: str | None = None
    tracks: str | None = None
    trajectory: str | None = None
    imu: str | None = None
    initial_state: str | None = None
    intrinsics: str | None = None
    out: str | None = None
    json_out: str | None = None

    def __post_init__(self):
        if self.mode not in ("single_sample", "with_visual"):
            raise DataFormatError(f"unknown mode {self.mode!r}")
        if self.time_tolerance <= 0:
            raise DataFormatError("time_tolerance must be positive")


def load_run_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """Build a RunConfig from an optional JSON file plus flag overrides."""
    payload: dict = {}
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"{path}: cannot read config: {exc}") from exc

    def merged(section: str, cls):
        base = dict(payload.get(section, {}))
        for key, value in overrides.get(section, {}).items():
            if value is not None:
                base[key] = value
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(base) - known
        if unknown:
            raise DataFormatError(f"config section '{section}': unknown keys {sorted(unknown)}")
        return cls(**base)

    guidance = merged("guidance", GuidanceConfig)
    energy = merged("energy", EnergyConfig)
    fusion = merged("fusion", FusionConfig)
    seed = overrides.get("seed")
    if seed is None:
        seed = payload.get("seed", 0)
    est = EstimatorConfig(guidance=guidance, energy=energy, fusion=fusion, seed=int(seed))

    run_kwargs = {}
    for name in (
        "mode",
        "time_tolerance",
        "search_radius",
        "frames",
        "tracks",
        "trajectory",
        "imu",
        "initial_state",
        "intrinsics",
        "out",
        "json_out",
    ):
        if name in payload:
            run_kwargs[name] = payload[name]
        if overrides.get(name) is not None:
            run_kwargs[name] = overrides[name]
    return RunConfig(estimator=est, **run_kwargs)


def correspondence_seed(base_seed: int, frame_id: int, track_id: int) -> int:
    return int(np.random.SeedSequence((base_seed, frame_id, track_id)).generate_state(1)[0])


def _match_poses_to_frames(
    frames: list[FrameRecord], stamped: list[tuple[float, Pose]], tolerance: float
) -> dict[int, Pose]:
    times = np.array([t for t, _ in stamped])
    out = {}
    for rec in frames:
        idx = int(np.argmin(np.abs(times - rec.timestamp)))
        if abs(times[idx] - rec.timestamp) > tolerance:
            raise DataFormatError(
                f"frame {rec.frame_id}: no pose within {tolerance}s of t={rec.timestamp}"
            )
        out[rec.frame_id] = stamped[idx][1]
    return out


def run_estimate(
    frames: list[FrameRecord],
    images: dict[int, ImagePlane],
    tracks: list[TrackRow],
    poses: dict[int, Pose],
    camera: CameraModel,
    config: RunConfig,
) -> list[ResultRow]:
    """Estimate every track correspondence between consecutive observations.

    For each track, consecutive observed frames form a pair; an explicit
    (vx, vy) on a row instead targets the next frame in the sequence.  The
    reference point for later pairs follows the propagation mode.  Each
    target frame's covariances are normalized to the configured average
    determinant before the rows are returned.
    """
    frame_order = [f.frame_id for f in frames]
    frame_pos = {fid: i for i, fid in enumerate(frame_order)}
    by_track: dict[int, list[TrackRow]] = {}
    for row in tracks:
        if row.frame_id not in frame_pos:
            raise DataFormatError(f"track {row.track_id}: unknown frame {row.frame_id}")
        by_track.setdefault(row.track_id, []).append(row)

    est_cfg = config.estimator
    raw: list[tuple[int, int, object]] = []  # (frame, track, uncertainty)
    for track_id in sorted(by_track):
        rows = sorted(by_track[track_id], key=lambda r: frame_pos[r.frame_id])
        obs_by_frame = {r.frame_id: r for r in rows}
        state = None
        for row in rows:
            i = frame_pos[row.frame_id]
            # pair target: next observed frame, or the next frame in the
            # sequence when the row carries an explicit visual match
            target_id = None
            x_v = None
            for later in rows:
                if frame_pos[later.frame_id] > i:
                    target_id = later.frame_id
                    x_v = np.array([later.x, later.y])
                    break
            if row.visual is not None:
                if i + 1 >= len(frame_order):
                    raise DataFormatError(
                        f"track {track_id}: visual match on the last frame {row.frame_id}"
                    )
                target_id = frame_order[i + 1]
                x_v = np.array(row.visual)
            if target_id is None:
                continue

            if state is None:
                ref_primary = np.array([row.x, row.y])
                extra: tuple = ()
            else:
                ref_primary, extra = next_reference_points(state, config.mode)
            rel = relative_pose(poses[row.frame_id], poses[target_id])
            query = CorrespondenceQuery(
                ref_primary,
                x_v,
                images[row.frame_id],
                images[target_id],
                camera,
                rel,
                depth=None,
                extra_ref_points=extra,
            )
            seed = correspondence_seed(est_cfg.seed, target_id, track_id)
            unc = estimate_correspondence(query, est_cfg, seed=seed)
            raw.append((target_id, track_id, unc))
            if state is None:
                state = start_track(track_id, target_id, unc, x_v)
            else:
                state = propagate_track(state, unc, target_id, x_v, config.mode)

    # per-image barrier: normalize covariances frame by frame
    out: list[ResultRow] = []
    for fid in frame_order:
        frame_rows = [(t, u) for (f, t, u) in raw if f == fid]
        if not frame_rows:
            continue
        uncs = [u for _, u in frame_rows]
        scaled, _ = normalize_frame(uncs, est_cfg.fusion.target_det)
        for (track_id, _), unc in zip(frame_rows, scaled):
            out.append(ResultRow(fid, track_id, unc))
    return sorted(out, key=lambda r: (r.frame_id, r.track_id))


# --------------------------------------------------------------------------
# subcommands


def cmd_estimate(args: argparse.Namespace) -> int:
    overrides = {
        "guidance": {
            "alpha": args.alpha,
            "r_max": args.r_max,
            "d_max": args.d_max,
            "l0": args.l0,
            "n": args.grid_n,
            "depth_sigma_ratio": args.depth_sigma_ratio,
            "num_guidance": args.num_guidance,
            "epipolar_candidate": True if args.epipolar_candidate else None,
        },
        "energy": {
            "patch_half": args.patch_half,
            "lambda_lo": args.lambda_lo,
            "lambda_hi": args.lambda_hi,
        },
        "fusion": {
            "target_det": args.target_det,
            "fallback_sigma": args.fallback_sigma,
        },
        "seed": args.seed,
        "mode": args.mode,
        "time_tolerance": args.time_tolerance,
        "frames": args.frames,
        "tracks": args.tracks,
        "trajectory": args.trajectory,
        "imu": args.imu,
        "initial_state": args.initial_state,
        "intrinsics": args.intrinsics,
        "out": args.out,
        "json_out": args.json_out,
    }
    config = load_run_config(args.config, overrides)
    for required in ("frames", "tracks", "intrinsics", "out"):
        if getattr(config, required) is None:
            raise DataFormatError(f"missing required input: --{required.replace('_', '-')}")
    if config.trajectory is None and config.imu is None:
        raise DataFormatError("need either --trajectory or --imu gravity-frame poses")

    camera = dataio.read_intrinsics(config.intrinsics)
    frames = dataio.read_frames_csv(config.frames)
    frames_dir = Path(config.frames).parent
    images = {}
    for rec in frames:
        img_path = Path(rec.path)
        if not img_path.is_absolute():
            img_path = frames_dir / img_path
        images[rec.frame_id] = dataio.read_pgm(img_path)
    tracks = dataio.read_tracks_csv(config.tracks, camera)

    if config.trajectory is not None:
        stamped = dataio.read_trajectory(config.trajectory)
    else:
        samples = dataio.read_imu_csv(config.imu)
        if config.initial_state is None:
            raise DataFormatError("--imu requires --initial-state")
        state, t0 = dataio.read_initial_state(config.initial_state)
        gravity = np.array([float(v) for v in args.gravity.split(",")])
        poses_seq = integrate_imu(samples, state, gravity)
        stamped = [(s.timestamp, p) for s, p in zip(samples, poses_seq)]
    poses = _match_poses_to_frames(frames, stamped, config.time_tolerance)

    rows = run_estimate(frames, images, tracks, poses, camera, config)
    dataio.write_results_csv(config.out, rows)
    if config.json_out:
        dataio.write_results_json(config.json_out, rows, extra={"seed": config.estimator.seed})
    print(f"wrote {len(rows)} correspondences to {config.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene, degradation = make_scenario(args.scenario, args.seed)
    cam = scene.camera

    (out_dir / "images").mkdir(exist_ok=True)
    frames = []
    renders = []
    for idx in range(len(scene.poses)):
        image, truths = render_view(scene, idx, degradation)
        rel_path = f"images/frame_{idx:04d}.pgm"
        dataio.write_pgm(out_dir / rel_path, image)
        frames.append(FrameRecord(idx, scene.timestamps[idx], rel_path))
        renders.append((image, truths))

    dataio.write_frames_csv(out_dir / "frames.csv", frames)
    dataio.write_intrinsics(out_dir / "intrinsics.json", cam)
    dataio.write_trajectory(
        out_dir / "trajectory.txt", list(zip(scene.timestamps, scene.poses))
    )
    (out_dir / "scene.json").write_text(dataio.scene_to_json(scene, degradation))

    # observations: exact detections in the first frame, matched thereafter
    track_rows: list[TrackRow] = []
    truth_rows: list[TruthRow] = []
    for feat in sorted(renders[0][1]):
        prev_pt = renders[0][1][feat]
        track_rows.append(TrackRow(0, feat, float(prev_pt[0]), float(prev_pt[1])))
        for idx in range(1, len(renders)):
            truths = renders[idx][1]
            if feat not in truths:
                break
            try:
                matched = visual_match(
                    renders[idx - 1][0], renders[idx][0], prev_pt, args.search_radius
                )
            except FeatuncertError:
                break
            track_rows.append(TrackRow(idx, feat, float(matched[0]), float(matched[1])))
            truth_rows.append(
                TruthRow(
                    idx,
                    feat,
                    float(truths[feat][0]),
                    float(truths[feat][1]),
                    (float(matched[0]), float(matched[1])),
                )
            )
            prev_pt = matched
    dataio.write_tracks_csv(out_dir / "tracks.csv", track_rows)
    dataio.write_truth_csv(out_dir / "truth.csv", truth_rows)
    print(f"wrote scenario '{args.scenario}' (seed {args.seed}) to {out_dir}")
    return 0


def nees(error: np.ndarray, cov: np.ndarray) -> float:
    """Normalized estimation error squared for a 2D error and 2x2 covariance."""
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * c - b * b
    if det <= 0 or not math.isfinite(det):
        return math.nan
    ex, ey = error
    return float((c * ex * ex - 2.0 * b * ex * ey + a * ey * ey) / det)


def cmd_eval(args: argparse.Namespace) -> int:
    results = dataio.read_results_csv(args.results)
    truths = dataio.read_truth_csv(args.truth)
    truth_by_id = {(t.frame_id, t.track_id): t for t in truths}
    matched = [(r, truth_by_id[(r.frame_id, r.track_id)]) for r in results if (r.frame_id, r.track_id) in truth_by_id]
    if not matched:
        raise DataFormatError("no (frame, track) ids shared between results and ground truth")

    mean_errs = []
    visual_errs = []
    nees_vals = []
    for r, t in matched:
        truth_pt = np.array([t.x_true, t.y_true])
        err = r.uncertainty.mean - truth_pt
        mean_errs.append(float(np.linalg.norm(err)))
        nees_vals.append(nees(err, r.uncertainty.covariance))
        if t.visual is not None:
            visual_errs.append(float(np.linalg.norm(np.array(t.visual) - truth_pt)))

    nees_clean = [v for v in nees_vals if math.isfinite(v)]
    metrics = {
        "count": len(matched),
        "mean_error_px": {
            "mean": float(np.mean(mean_errs)),
            "median": float(np.median(mean_errs)),
        },
        "nees": {
            "count": len(nees_clean),
            "mean": float(np.mean(nees_clean)) if nees_clean else None,
            "median": float(np.median(nees_clean)) if nees_clean else None,
            "per_dof": float(np.mean(nees_clean) / 2.0) if nees_clean else None,
        },
    }
    if visual_errs:
        metrics["visual_error_px"] = {
            "mean": float(np.mean(visual_errs)),
            "median": float(np.median(visual_errs)),
        }
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_overlay(args: argparse.Namespace) -> int:
    image = dataio.read_pgm(args.image)
    try:
        rows = dataio.read_results_csv(args.results)
    except DataFormatError as exc:
        # a header-only results file still produces an image-only overlay
        if "no result rows" not in str(exc):
            raise
        rows = []
    if args.frame is not None:
        rows = [r for r in rows if r.frame_id == args.frame]
    visual_points = None
    if args.tracks:
        camera = None
        track_rows = dataio.read_tracks_csv(args.tracks, camera)
        visual_points = {(r.frame_id, r.track_id): (r.x, r.y) for r in track_rows}
    scales = tuple(float(s) for s in args.sigma_scales.split(","))
    write_overlay_svg(args.out, image, rows, visual_points, scales)
    print(f"wrote overlay with {len(rows)} results to {args.out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featuncert",
        description="Correspondence uncertainty estimation with inertial guidance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="estimate correspondence uncertainties")
    p_est.add_argument("--frames", help="frames manifest CSV (frame,timestamp,path)")
    p_est.add_argument("--tracks", help="track observations CSV (frame,track,x,y[,vx,vy])")
    p_est.add_argument("--intrinsics", help="camera intrinsics JSON")
    p_est.add_argument("--trajectory", help="TUM trajectory file (timestamp tx ty tz qx qy qz qw)")
    p_est.add_argument("--imu", help="IMU CSV (timestamp,wx,wy,wz,ax,ay,az)")
    p_est.add_argument("--initial-state", dest="initial_state", help="initial IMU state JSON")
    p_est.add_argument("--gravity", default="0,0,-9.81", help="gravity vector, comma separated")
    p_est.add_argument("--config", help="JSON run configuration")
    p_est.add_argument("--seed", type=int, required=True, help="base seed for all sampling")
    p_est.add_argument("--out", help="output results CSV")
    p_est.add_argument("--json-out", dest="json_out", help="optional results JSON")
    p_est.add_argument("--mode", choices=("single_sample", "with_visual"), default=None)
    p_est.add_argument("--time-tolerance", dest="time_tolerance", type=float, default=None)
    p_est.add_argument("--alpha", type=float, default=None)
    p_est.add_argument("--r-max", dest="r_max", type=float, default=None)
    p_est.add_argument("--d-max", dest="d_max", type=float, default=None)
    p_est.add_argument("--l0", type=float, default=None)
    p_est.add_argument("--grid-n", dest="grid_n", type=int, default=None)
    p_est.add_argument("--depth-sigma-ratio", dest="depth_sigma_ratio", type=float, default=None)
    p_est.add_argument("--num-guidance", dest="num_guidance", type=int, default=None)
    p_est.add_argument("--epipolar-candidate", dest="epipolar_candidate", action="store_true")
    p_est.add_argument("--patch-half", dest="patch_half", type=int, default=None)
    p_est.add_argument("--lambda-lo", dest="lambda_lo", type=float, default=None)
    p_est.add_argument("--lambda-hi", dest="lambda_hi", type=float, default=None)
    p_est.add_argument("--target-det", dest="target_det", type=float, default=None)
    p_est.add_argument("--fallback-sigma", dest="fallback_sigma", type=float, default=None)
    p_est.set_defaults(func=cmd_estimate)

    p_syn = sub.add_parser("synth", help="generate a synthetic fixture")
    p_syn.add_argument("scenario", help="scenario name (see error message for options)")
    p_syn.add_argument("--seed", type=int, required=True)
    p_syn.add_argument("--out", required=True, help="output directory")
    p_syn.add_argument("--search-radius", dest="search_radius", type=float, default=3.0)
    p_syn.set_defaults(func=cmd_synth)

    p_eval = sub.add_parser("eval", help="compare results against ground truth")
    p_eval.add_argument("--results", required=True)
    p_eval.add_argument("--truth", required=True)
    p_eval.add_argument("--out", help="metrics JSON path")
    p_eval.set_defaults(func=cmd_eval)

    p_ovl = sub.add_parser("overlay", help="write covariance-ellipse SVG overlay")
    p_ovl.add_argument("--image", required=True, help="PGM image")
    p_ovl.add_argument("--results", required=True, help="results CSV")
    p_ovl.add_argument("--frame", type=int, default=None, help="only draw this frame id")
    p_ovl.add_argument("--tracks", default=None, help="tracks CSV for visual-point markers")
    p_ovl.add_argument("--sigma-scales", dest="sigma_scales", default="1,2")
    p_ovl.add_argument("--out", required=True, help="output SVG path")
    p_ovl.set_defaults(func=cmd_overlay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FeatuncertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
