"""Build the optional Cython kernels.

The package works without them: ``mgvsim.kernels`` falls back to the
pure-Python implementation when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("MGVSIM_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mgvsim._kernels",
                    ["src/mgvsim/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math: the fallback must match to rounding error
                    extra_compile_args=["-O3"],
                    optional=True,
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except Exception as exc:  # no Cython / numpy, or cythonize failed
        print(f"mgvsim: building without compiled kernels ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
