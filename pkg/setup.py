"""Build the optional Cython kernels.

The package works without them: ``sdq._kernels`` falls back to numpy when
the extension is missing.  Set ``SDQ_NO_EXT=1`` to skip compilation.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SDQ_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "sdq._ckernels",
                    ["src/sdq/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math: reductions must stay bit-reproducible
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
