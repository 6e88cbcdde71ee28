"""Backend selection for the hot loops.

The compiled extension is used when it was built; set ``MGVSIM_PURE_PYTHON=1``
to force the pure-Python implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("MGVSIM_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

vehicle_advance = _impl.vehicle_advance
profile_cells = _impl.profile_cells
interp = _impl.interp

N_STATE = _kernels_py.N_STATE
N_CONSTS = _kernels_py.N_CONSTS


def backends():
    """Map of available backend name -> module, compiled first."""
    out = {}
    try:
        from . import _kernels as compiled

        out["cython"] = compiled
    except ImportError:
        pass
    out["python"] = _kernels_py
    return out
