"""Build script for the optional compiled physics kernel.

The package works without the extension (a pure-Python kernel is selected at
import time), so any failure here degrades the install instead of breaking it.
The compiled kernel must produce bit-identical trajectories to the Python one,
so two fusions are disabled: FP contraction (fused multiply-adds round
differently) and the sin/cos pair fusion into glibc sincos, whose cosine can
differ from a standalone cos call by one ulp.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("QUADBALL_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "quadball.physics._kernel_cy",
                    sources=["src/quadball/physics/_kernel_cy.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=[
                        "-O3",
                        "-ffp-contract=off",
                        "-fno-builtin-sin",
                        "-fno-builtin-cos",
                    ],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
