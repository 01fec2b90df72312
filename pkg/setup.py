"""Build script: compiles the fast encoder kernels when Cython is available.

The package works without the extension (the numpy reference kernels are
selected at import time), so a failed extension build only costs speed.
"""

import os

from setuptools import Extension, setup

PYX = "src/promptstream/kernels/_fast.pyx"

ext_modules = []
if os.path.exists(PYX):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "promptstream.kernels._fast",
                    [PYX],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )

setup(ext_modules=ext_modules)
