"""Pure-numpy kernels; fallback when the compiled extension is unavailable.

Semantics match ``_kernels.pyx`` exactly (same clamping and interpolation
formulas); only summation order may differ at the last few ulps.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def bilinear_many(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``img`` (indexed [y, x]) at coordinates (xs, ys).

    Callers must guarantee 0 <= x <= width-1 and 0 <= y <= height-1.
    """
    h, w = img.shape
    x0 = np.minimum(np.floor(xs), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(ys), h - 2).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)


def patch_rmse_from_ref(
    tgt: np.ndarray,
    ref_patch: np.ndarray,
    centers: np.ndarray,
    offsets: np.ndarray,
) -> np.ndarray:
    """RMSE between a precomputed reference patch and target patches.

    ``ref_patch`` holds the reference intensities at the displacement set
    ``offsets``; for each row of ``centers`` the target patch is sampled at
    center + offsets.  Returns NaN where the target patch (including the
    interpolation margin) leaves the image.
    """
    h, w = tgt.shape
    xs = centers[:, 0:1] + offsets[None, :, 0]  # (n, m)
    ys = centers[:, 1:2] + offsets[None, :, 1]
    ok = (
        (xs.min(axis=1) >= 0.0)
        & (xs.max(axis=1) <= w - 1.0)
        & (ys.min(axis=1) >= 0.0)
        & (ys.max(axis=1) <= h - 1.0)
    )
    out = np.full(centers.shape[0], np.nan)
    if np.any(ok):
        vals = bilinear_many(tgt, xs[ok].ravel(), ys[ok].ravel()).reshape(-1, offsets.shape[0])
        diff = vals - ref_patch[None, :]
        out[ok] = np.sqrt(np.mean(diff * diff, axis=1))
    return out


def kl_objective(delta: np.ndarray, u: np.ndarray, alpha: float, k: float) -> float:
    """Pseudo-KL objective (up to the positive factor q(x_v)) at scale k.

    delta = e(x) - e(x_v), u = psi_d(x) - psi_d(x_v); the exponent is capped
    to keep the value finite for extreme k.
    """
    ex = np.exp(np.minimum(-k * delta, 700.0))
    return float(np.sum(ex * (alpha * u - k * delta)))
