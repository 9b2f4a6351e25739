from setuptools import Extension, setup

# The compiled kernel module is optional: the package falls back to the numpy
# reference kernels when the extension is absent (see kvrot._kernels).
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "kvrot._kernels._core",
                ["src/kvrot/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
