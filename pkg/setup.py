"""Builds the optional compiled kernels (switchboard._kernels._speedups).

The package is fully functional without the extension: _kernels falls back
to the pure-Python implementations at import time. A missing compiler or
Cython therefore skips the extension instead of failing the install.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "switchboard._kernels._speedups",
                ["src/switchboard/_kernels/_speedups.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
