import os

from setuptools import setup

ext_modules = []
if os.environ.get("CROPA_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("cropa._encoder", ["src/cropa/_encoder.pyx"], extra_compile_args=["-O3"])],
            language_level="3",
        )
    except ImportError:
        # pure-Python install; cropa.kernels falls back to numpy
        ext_modules = []

setup(ext_modules=ext_modules)
