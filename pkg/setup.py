"""Build script for the compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so the build degrades gracefully when Cython or a C compiler
is unavailable.  Set MEMREPORT_SKIP_EXT=1 to force a pure-Python install.
"""

import os

from setuptools import Extension, setup


def extensions():
    if os.environ.get("MEMREPORT_SKIP_EXT"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "memreport._kernels.cykernels",
        ["src/memreport/_kernels/cykernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level="3")


setup(ext_modules=extensions())
