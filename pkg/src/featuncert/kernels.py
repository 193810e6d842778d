"""Kernel backend selection.

The compiled Cython kernels are used when present; otherwise the numpy
fallback takes over.  Set ``FEATUNCERT_PURE_PYTHON=1`` to force the fallback
(used by the benchmark and by backend-equivalence tests).
"""

from __future__ import annotations

import os

if os.environ.get("FEATUNCERT_PURE_PYTHON", "") not in ("", "0"):
    from ._kernels_py import BACKEND, bilinear_many, kl_objective, patch_rmse_from_ref
else:
    try:
        from ._kernels import BACKEND, bilinear_many, kl_objective, patch_rmse_from_ref
    except ImportError:  # extension not built
        from ._kernels_py import BACKEND, bilinear_many, kl_objective, patch_rmse_from_ref

__all__ = ["BACKEND", "bilinear_many", "patch_rmse_from_ref", "kl_objective"]
