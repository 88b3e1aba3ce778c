"""Kernel backend selection.

The compiled Cython module is used when it was built and importable;
otherwise the numpy fallback is used. Setting ``PROSUB_KERNELS=python``
forces the fallback, which is how the benchmark and the cross-backend
tests get at both.
"""

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if os.environ.get("PROSUB_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        kernels = _ckernels
        BACKEND = "cython"

LINEAR = _pykernels.LINEAR
RELU = _pykernels.RELU
SCALED_SIGMOID2 = _pykernels.SCALED_SIGMOID2


def available_backends():
    """Map of backend name to kernel module for every backend that imports."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        return found
    found["cython"] = _ckernels
    return found
