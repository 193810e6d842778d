"""Build script: compiles the optional Cython kernel core.

If Cython (or a C compiler) is unavailable the package still installs and
falls back to the pure-numpy kernels at import time.
"""

import warnings

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "featuncert._kernels",
                ["src/featuncert/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except Exception as exc:  # pragma: no cover - degraded build environment
    warnings.warn(f"compiled kernels disabled, using pure-Python fallback: {exc}")

setup(ext_modules=ext_modules)
