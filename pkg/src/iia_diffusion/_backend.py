"""Kernel backend selection.

The compiled kernel is used when it imports; ``IIA_DIFFUSION_BACKEND=python``
forces the numpy fallback.
"""

import os

from . import _gm_python

BACKEND = "python"
gm_posterior = _gm_python.gm_posterior

if os.environ.get("IIA_DIFFUSION_BACKEND", "").lower() != "python":
    try:
        from ._gmkernel import gm_posterior  # noqa: F811
    except ImportError:
        pass
    else:
        BACKEND = "cython"

KERNELS = {"python": _gm_python.gm_posterior}
if BACKEND == "cython":
    KERNELS["cython"] = gm_posterior
