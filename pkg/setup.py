"""Build script for the optional native kernels.

The package works without the extension (a numpy fallback is selected at
import time); the extension only accelerates the top-k scan and the
k-means Lloyd step.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "wsireport.kernels._native",
                ["src/wsireport/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        language_level=3,
    )
except Exception as exc:  # no Cython/compiler: install pure-python only
    print(f"skipping native kernel build: {exc}")
    extensions = []

setup(ext_modules=extensions)
