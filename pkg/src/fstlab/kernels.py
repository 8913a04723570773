"""Kernel dispatch: compiled Cython core when importable, Python otherwise.

Set ``FSTLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
if not os.environ.get("FSTLAB_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

edit_distance = _impl.edit_distance
edit_distance_batch = _impl.edit_distance_batch

__all__ = ["BACKEND", "edit_distance", "edit_distance_batch"]
