"""Build script for the optional compiled kernels.

The package works without them; ``gocpt.kernels`` falls back to numpy.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - no Cython, pure-Python install
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("gocpt._kernels", ["src/gocpt/_kernels.pyx"], optional=True)],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
