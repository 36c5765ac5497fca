"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Setting ``VARIGRAD_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("VARIGRAD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"

philox4x32 = _impl.philox4x32
normals = _impl.normals
uniforms = _impl.uniforms
datapoint_forward = _impl.datapoint_forward
datapoint_backward = _impl.datapoint_backward


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"compiled"``."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
