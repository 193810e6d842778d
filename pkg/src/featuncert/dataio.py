"""File formats: images, trajectories, IMU logs, tracks, results, scenes.

All text formats round-trip losslessly (floats are written with ``repr``,
the shortest exact decimal form) and all writers are deterministic, so a
repeated run produces byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .energy import ImagePlane
from .errors import DataFormatError
from .fusion import CorrespondenceUncertainty
from .geometry import CameraModel, ImuSample, ImuState, Pose, pose_from_quaternion, quaternion_from_rotation
from .synthlab import DegradationParams, SyntheticScene, TextureComponent


def _fmt(v: float) -> str:
    return repr(float(v))


# --------------------------------------------------------------------------
# PGM images (binary P5 and ASCII P2, 8-bit)


def write_pgm(path: str | Path, image: ImagePlane, ascii_format: bool = False) -> None:
    levels = np.clip(np.rint(image.intensities * 255.0), 0, 255).astype(np.uint8)
    h, w = levels.shape
    if ascii_format:
        lines = [f"P2\n{w} {h}\n255\n"]
        for row in levels:
            lines.append(" ".join(str(int(v)) for v in row) + "\n")
        Path(path).write_text("".join(lines))
    else:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(levels.tobytes())


def read_pgm(path: str | Path) -> ImagePlane:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] not in (b"P2", b"P5"):
        raise DataFormatError(f"{path}:1: not a PGM file (magic {data[:2]!r})")
    binary = data[:2] == b"P5"
    # header: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataFormatError(f"{path}: malformed PGM header: {exc}") from exc
    if maxval != 255:
        raise DataFormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    if binary:
        pos += 1  # single whitespace after maxval
        raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    else:
        raster = np.array(data[pos:].split(), dtype=np.int64)
        if raster.size != w * h:
            raise DataFormatError(f"{path}: expected {w * h} samples, found {raster.size}")
    return ImagePlane(raster.reshape(h, w).astype(np.float64) / 255.0)


# --------------------------------------------------------------------------
# trajectories and IMU logs


def write_trajectory(path: str | Path, stamped_poses: list[tuple[float, Pose]]) -> None:
    lines = []
    for t, pose in stamped_poses:
        qx, qy, qz, qw = quaternion_from_rotation(pose.rotation)
        px, py, pz = pose.position
        lines.append(
            " ".join([_fmt(t), _fmt(px), _fmt(py), _fmt(pz), _fmt(qx), _fmt(qy), _fmt(qz), _fmt(qw)])
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> list[tuple[float, Pose]]:
    """One pose per line: "timestamp tx ty tz qx qy qz qw"; '#' comments allowed."""
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        t = vals[0]
        pose = pose_from_quaternion(vals[1:4], *vals[4:8])
        out.append((t, pose))
    if not out:
        raise DataFormatError(f"{path}: no poses found")
    return out


def write_imu_csv(path: str | Path, samples: list[ImuSample]) -> None:
    lines = ["timestamp,wx,wy,wz,ax,ay,az"]
    for s in samples:
        w, a = s.angular_velocity, s.acceleration
        lines.append(",".join([_fmt(s.timestamp), _fmt(w[0]), _fmt(w[1]), _fmt(w[2]), _fmt(a[0]), _fmt(a[1]), _fmt(a[2])]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_imu_csv(path: str | Path) -> list[ImuSample]:
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if lineno == 1 and line.lower().startswith("timestamp"):
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise DataFormatError(f"{path}:{lineno}: expected 7 comma-separated fields, got {len(parts)}")
        try:
            t, wx, wy, wz, ax, ay, az = (float(p) for p in parts)
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        out.append(ImuSample(t, np.array([wx, wy, wz]), np.array([ax, ay, az])))
    if len(out) < 2:
        raise DataFormatError(f"{path}: need at least two IMU samples")
    return out


def write_intrinsics(path: str | Path, camera: CameraModel) -> None:
    payload = {
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "width": camera.width,
        "height": camera.height,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_intrinsics(path: str | Path) -> CameraModel:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        return CameraModel(
            fx=float(payload["fx"]),
            fy=float(payload["fy"]),
            cx=float(payload["cx"]),
            cy=float(payload["cy"]),
            width=int(payload["width"]),
            height=int(payload["height"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"{path}: invalid intrinsics: {exc}") from exc


def write_initial_state(path: str | Path, state: ImuState, timestamp: float) -> None:
    qx, qy, qz, qw = quaternion_from_rotation(state.pose.rotation)
    payload = {
        "timestamp": timestamp,
        "position": list(map(float, state.pose.position)),
        "rotation_quat": [qx, qy, qz, qw],
        "velocity": list(map(float, state.velocity)),
        "gyro_bias": list(map(float, state.gyro_bias)),
        "accel_bias": list(map(float, state.accel_bias)),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_initial_state(path: str | Path) -> tuple[ImuState, float]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
        pose = pose_from_quaternion(payload["position"], *payload["rotation_quat"])
        state = ImuState(
            pose=pose,
            velocity=np.asarray(payload["velocity"], dtype=np.float64),
            gyro_bias=np.asarray(payload.get("gyro_bias", [0, 0, 0]), dtype=np.float64),
            accel_bias=np.asarray(payload.get("accel_bias", [0, 0, 0]), dtype=np.float64),
        )
        return state, float(payload["timestamp"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"{path}: invalid initial state: {exc}") from exc


# --------------------------------------------------------------------------
# frame manifest and tracks


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    timestamp: float
    path: str


def write_frames_csv(path: str | Path, frames: list[FrameRecord]) -> None:
    lines = ["frame,timestamp,path"]
    for f in frames:
        lines.append(f"{f.frame_id},{_fmt(f.timestamp)},{f.path}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_frames_csv(path: str | Path) -> list[FrameRecord]:
    path = Path(path)
    out = []
    seen = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or (lineno == 1 and line.lower().startswith("frame")):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataFormatError(f"{path}:{lineno}: expected frame,timestamp,path")
        try:
            rec = FrameRecord(int(parts[0]), float(parts[1]), parts[2])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        if rec.frame_id in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate frame id {rec.frame_id}")
        seen.add(rec.frame_id)
        out.append(rec)
    if not out:
        raise DataFormatError(f"{path}: no frames found")
    return sorted(out, key=lambda r: r.frame_id)


@dataclass(frozen=True)
class TrackRow:
    frame_id: int
    track_id: int
    x: float
    y: float
    visual: tuple[float, float] | None = None  # explicit match in the next frame


def write_tracks_csv(path: str | Path, rows: list[TrackRow]) -> None:
    any_visual = any(r.visual is not None for r in rows)
    header = "frame,track,x,y,vx,vy" if any_visual else "frame,track,x,y"
    lines = [header]
    for r in sorted(rows, key=lambda r: (r.frame_id, r.track_id)):
        base = f"{r.frame_id},{r.track_id},{_fmt(r.x)},{_fmt(r.y)}"
        if any_visual:
            if r.visual is None:
                base += ",,"
            else:
                base += f",{_fmt(r.visual[0])},{_fmt(r.visual[1])}"
        lines.append(base)
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks_csv(path: str | Path, camera: CameraModel | None = None) -> list[TrackRow]:
    path = Path(path)
    out = []
    seen = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or (lineno == 1 and line.lower().startswith("frame")):
            continue
        parts = line.split(",")
        if len(parts) not in (4, 6):
            raise DataFormatError(f"{path}:{lineno}: expected 4 or 6 fields, got {len(parts)}")
        try:
            frame_id, track_id = int(parts[0]), int(parts[1])
            x, y = float(parts[2]), float(parts[3])
            visual = None
            if len(parts) == 6 and parts[4] != "" and parts[5] != "":
                visual = (float(parts[4]), float(parts[5]))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        key = (frame_id, track_id)
        if key in seen:
            raise DataFormatError(f"{path}:{lineno}: duplicate (frame, track) = {key}")
        seen.add(key)
        if camera is not None and not (0 <= x <= camera.width - 1 and 0 <= y <= camera.height - 1):
            raise DataFormatError(f"{path}:{lineno}: point ({x}, {y}) outside image bounds")
        out.append(TrackRow(frame_id, track_id, x, y, visual))
    if not out:
        raise DataFormatError(f"{path}: no track rows found")
    return out


# --------------------------------------------------------------------------
# results and ground truth


@dataclass(frozen=True)
class ResultRow:
    frame_id: int
    track_id: int
    uncertainty: CorrespondenceUncertainty

    def mean_diagnostics(self) -> tuple[float, float, bool]:
        diags = self.uncertainty.diagnostics
        if not diags:
            return math.nan, math.nan, False
        k = sum(d.k_star for d in diags) / len(diags)
        lam = sum(d.lam for d in diags) / len(diags)
        clipped = any(d.clipped for d in diags)
        return k, lam, clipped


RESULTS_HEADER = "frame,track,x_mean,y_mean,sxx,sxy,syy,k_star,lambda,clipped"


def write_results_csv(path: str | Path, rows: list[ResultRow]) -> None:
    lines = [RESULTS_HEADER]
    for r in sorted(rows, key=lambda r: (r.frame_id, r.track_id)):
        u = r.uncertainty
        k, lam, clipped = r.mean_diagnostics()
        lines.append(
            ",".join(
                [
                    str(r.frame_id),
                    str(r.track_id),
                    _fmt(u.mean[0]),
                    _fmt(u.mean[1]),
                    _fmt(u.covariance[0, 0]),
                    _fmt(u.covariance[0, 1]),
                    _fmt(u.covariance[1, 1]),
                    _fmt(k),
                    _fmt(lam),
                    str(int(clipped)),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_results_csv(path: str | Path) -> list[ResultRow]:
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or (lineno == 1 and line.lower().startswith("frame")):
            continue
        parts = line.split(",")
        if len(parts) != 10:
            raise DataFormatError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
        try:
            frame_id, track_id = int(parts[0]), int(parts[1])
            xm, ym, sxx, sxy, syy = (float(p) for p in parts[2:7])
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        unc = CorrespondenceUncertainty(
            np.array([xm, ym]), np.array([[sxx, sxy], [sxy, syy]]), hypotheses_used=1
        )
        out.append(ResultRow(frame_id, track_id, unc))
    if not out:
        raise DataFormatError(f"{path}: no result rows found")
    return out


def write_results_json(path: str | Path, rows: list[ResultRow], extra: dict | None = None) -> None:
    payload = {"results": [], **(extra or {})}
    for r in sorted(rows, key=lambda r: (r.frame_id, r.track_id)):
        u = r.uncertainty
        payload["results"].append(
            {
                "frame": r.frame_id,
                "track": r.track_id,
                "mean": [float(u.mean[0]), float(u.mean[1])],
                "covariance": [[float(v) for v in row] for row in u.covariance],
                "hypotheses_used": u.hypotheses_used,
                "diagnostics": [
                    {
                        "k_star": d.k_star,
                        "lambda": d.lam,
                        "clipped": d.clipped,
                        "degenerate": d.degenerate,
                    }
                    for d in u.diagnostics
                ],
            }
        )
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class TruthRow:
    frame_id: int
    track_id: int
    x_true: float
    y_true: float
    visual: tuple[float, float] | None = None


def write_truth_csv(path: str | Path, rows: list[TruthRow]) -> None:
    any_visual = any(r.visual is not None for r in rows)
    header = "frame,track,x_true,y_true,x_visual,y_visual" if any_visual else "frame,track,x_true,y_true"
    lines = [header]
    for r in sorted(rows, key=lambda r: (r.frame_id, r.track_id)):
        base = f"{r.frame_id},{r.track_id},{_fmt(r.x_true)},{_fmt(r.y_true)}"
        if any_visual:
            if r.visual is None:
                base += ",,"
            else:
                base += f",{_fmt(r.visual[0])},{_fmt(r.visual[1])}"
        lines.append(base)
    Path(path).write_text("\n".join(lines) + "\n")


def read_truth_csv(path: str | Path) -> list[TruthRow]:
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or (lineno == 1 and line.lower().startswith("frame")):
            continue
        parts = line.split(",")
        if len(parts) not in (4, 6):
            raise DataFormatError(f"{path}:{lineno}: expected 4 or 6 fields, got {len(parts)}")
        try:
            frame_id, track_id = int(parts[0]), int(parts[1])
            xt, yt = float(parts[2]), float(parts[3])
            visual = None
            if len(parts) == 6 and parts[4] != "" and parts[5] != "":
                visual = (float(parts[4]), float(parts[5]))
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        out.append(TruthRow(frame_id, track_id, xt, yt, visual))
    if not out:
        raise DataFormatError(f"{path}: no truth rows found")
    return out


# --------------------------------------------------------------------------
# scene serialization (regression fixtures)


def scene_to_json(scene: SyntheticScene, degradation: DegradationParams) -> str:
    stamped = []
    for t, pose in zip(scene.timestamps, scene.poses):
        qx, qy, qz, qw = quaternion_from_rotation(pose.rotation)
        stamped.append(
            {"timestamp": t, "position": list(map(float, pose.position)), "rotation_quat": [qx, qy, qz, qw]}
        )
    payload = {
        "camera": {
            "fx": scene.camera.fx,
            "fy": scene.camera.fy,
            "cx": scene.camera.cx,
            "cy": scene.camera.cy,
            "width": scene.camera.width,
            "height": scene.camera.height,
        },
        "poses": stamped,
        "plane_z": scene.plane_z,
        "texture": [c.to_dict() for c in scene.texture],
        "features": [[float(v) for v in row] for row in scene.features],
        "seed": scene.seed,
        "degradation": {
            "gaussian_blur_sigma": degradation.gaussian_blur_sigma,
            "intensity_noise_sigma": degradation.intensity_noise_sigma,
            "motion_blur_length": degradation.motion_blur_length,
            "motion_blur_angle": degradation.motion_blur_angle,
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def scene_from_json(text: str) -> tuple[SyntheticScene, DegradationParams]:
    try:
        payload = json.loads(text)
        cam = CameraModel(**payload["camera"])
        poses = []
        times = []
        for rec in payload["poses"]:
            poses.append(pose_from_quaternion(rec["position"], *rec["rotation_quat"]))
            times.append(float(rec["timestamp"]))
        texture = tuple(TextureComponent.from_dict(d) for d in payload["texture"])
        scene = SyntheticScene(
            cam,
            tuple(poses),
            tuple(times),
            float(payload["plane_z"]),
            texture,
            np.asarray(payload["features"], dtype=np.float64),
            int(payload["seed"]),
        )
        degr = DegradationParams(**payload["degradation"])
        return scene, degr
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"invalid scene JSON: {exc}") from exc
