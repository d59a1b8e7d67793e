"""Hot per-pixel kernels with two interchangeable backends.

The numba backend is used when importable; set SCANREG_NUMBA=0 to force the
pure-numpy fallback (or SCANREG_NUMBA=1 to require numba).  The selection is
made once at import time.  `benchmarks/bench_kernels.py` compares the two.
"""

from __future__ import annotations

import os

from . import _numpy_impl

_flag = os.environ.get("SCANREG_NUMBA", "auto").lower()

if _flag in ("0", "false", "no", "off"):
    _impl = _numpy_impl
    USING_NUMBA = False
elif _flag in ("1", "true", "yes", "on"):
    from . import _numba_impl as _impl

    USING_NUMBA = True
else:
    try:
        from . import _numba_impl as _impl

        USING_NUMBA = True
    except ImportError:
        _impl = _numpy_impl
        USING_NUMBA = False

depth_normals = _impl.depth_normals
raycast = _impl.raycast
farthest_point_order = _impl.farthest_point_order

__all__ = ["depth_normals", "raycast", "farthest_point_order", "USING_NUMBA"]
