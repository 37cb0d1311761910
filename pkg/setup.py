import os

from setuptools import setup

ext_modules = []
if os.environ.get("S2FP8_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "s2fp8._ckernels",
                    ["src/s2fp8/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: GEMM must match the sequential reference bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
