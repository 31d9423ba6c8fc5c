"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is used when it was built and ``BIPLANAR3D_PURE_PYTHON``
is not set. ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os

from . import _fallback

fallback = _fallback

if os.environ.get("BIPLANAR3D_PURE_PYTHON"):
    compiled = None
else:
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

if compiled is not None:
    im2col3d = compiled.im2col3d
    col2im3d = compiled.col2im3d
    integrate_rays = compiled.integrate_rays
    BACKEND = "cython"
else:
    im2col3d = _fallback.im2col3d
    col2im3d = _fallback.col2im3d
    integrate_rays = _fallback.integrate_rays
    BACKEND = "python"

__all__ = ["BACKEND", "col2im3d", "compiled", "fallback", "im2col3d", "integrate_rays"]
