import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# FMA contraction and sin/cos fusion would change rounding relative to the
# pure-Python backend; both backends must agree bit for bit.
extra = ["-O2", "-ffp-contract=off", "-fno-builtin-sin", "-fno-builtin-cos", "-fno-builtin-sincos"]

ext = Extension(
    "tcsim.kernel._ckernel",
    ["src/tcsim/kernel/_ckernel.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=extra,
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": 3}))
