import os

import numpy as np
from setuptools import Extension, setup

extensions = []
if not os.environ.get("TOKENLAB_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:  # build without the compiled core
        cythonize = None
    if cythonize is not None:
        extensions = cythonize(
            [
                Extension(
                    "tokenlab._kernels",
                    ["src/tokenlab/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=extensions)
