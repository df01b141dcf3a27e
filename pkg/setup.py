"""Builds the optional compiled graph kernels; the package works without them."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("DPUFAM_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("dpufam.graphbench._kernels_ext",
                       ["src/dpufam/graphbench/_kernels_ext.pyx"],
                       include_dirs=[numpy.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                       extra_compile_args=["-O3", "-ffp-contract=off"])],
            language_level=3)

setup(ext_modules=ext_modules)
