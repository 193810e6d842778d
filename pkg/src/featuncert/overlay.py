"""Covariance-ellipse overlays as standalone SVG files.

The image is embedded as a base64 PNG; each result contributes 1-sigma and
2-sigma ellipses around the corrected mean, a cross marker at the mean, and
an x marker at the visual point when one is supplied.  Output bytes are a
pure function of the inputs.
"""

from __future__ import annotations

import base64
import io
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .dataio import ResultRow
from .energy import ImagePlane
from .fusion import eigen_2x2


def _png_data_uri(image: ImagePlane) -> str:
    levels = np.clip(np.rint(image.intensities * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(levels, mode="L").save(buf, format="PNG", optimize=False)
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _ellipse_svg(mean: np.ndarray, cov: np.ndarray, scale: float, color: str) -> str:
    lam1, lam2, axis = eigen_2x2(cov)
    r1 = scale * math.sqrt(max(lam1, 0.0))
    r2 = scale * math.sqrt(max(lam2, 0.0))
    angle = math.degrees(math.atan2(axis[1], axis[0]))
    return (
        f'<ellipse cx="0" cy="0" rx="{r1:.4f}" ry="{r2:.4f}" '
        f'transform="translate({mean[0]:.4f} {mean[1]:.4f}) rotate({angle:.4f})" '
        f'fill="none" stroke="{color}" stroke-width="0.15"/>'
    )


def _cross(x: float, y: float, size: float, color: str) -> str:
    return (
        f'<path d="M {x - size:.4f} {y:.4f} H {x + size:.4f} M {x:.4f} {y - size:.4f} '
        f'V {y + size:.4f}" stroke="{color}" stroke-width="0.2" fill="none"/>'
    )


def _xmark(x: float, y: float, size: float, color: str) -> str:
    return (
        f'<path d="M {x - size:.4f} {y - size:.4f} L {x + size:.4f} {y + size:.4f} '
        f'M {x - size:.4f} {y + size:.4f} L {x + size:.4f} {y - size:.4f}" '
        f'stroke="{color}" stroke-width="0.2" fill="none"/>'
    )


def write_overlay_svg(
    path: str | Path,
    image: ImagePlane,
    rows: list[ResultRow],
    visual_points: dict[tuple[int, int], tuple[float, float]] | None = None,
    sigma_scales: tuple[float, ...] = (1.0, 2.0),
) -> None:
    w, h = image.width, image.height
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{4 * w}" height="{4 * h}" '
        f'viewBox="-0.5 -0.5 {w} {h}">',
        f'<image x="-0.5" y="-0.5" width="{w}" height="{h}" '
        'style="image-rendering:pixelated" href="' + _png_data_uri(image) + '"/>',
    ]
    colors = ("#ff3030", "#ff9030", "#ffd030")
    for row in sorted(rows, key=lambda r: (r.frame_id, r.track_id)):
        u = row.uncertainty
        for i, s in enumerate(sigma_scales):
            parts.append(_ellipse_svg(u.mean, u.covariance, s, colors[min(i, len(colors) - 1)]))
        parts.append(_cross(u.mean[0], u.mean[1], 0.8, "#30ff60"))
        if visual_points:
            vp = visual_points.get((row.frame_id, row.track_id))
            if vp is not None:
                parts.append(_xmark(vp[0], vp[1], 0.8, "#3090ff"))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
