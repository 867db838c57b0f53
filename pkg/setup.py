import os

import numpy as np
from setuptools import Extension, setup


def _extensions():
    if os.environ.get("FSLAB_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "fslab._kernels._fused",
        ["src/fslab/_kernels/_fused.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=_extensions())
