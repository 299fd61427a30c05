import os

from setuptools import setup

ext_modules = []
if os.environ.get("SMARTGLOVE_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "smartglove.nncore._lstm_ext",
                    ["src/smartglove/nncore/_lstm_ext.pyx"],
                    extra_compile_args=["-O3", "-ffast-math", "-march=native"],
                    libraries=["mvec", "m"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
