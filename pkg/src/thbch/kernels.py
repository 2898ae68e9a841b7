"""Kernel dispatch: compiled extension if importable, numpy otherwise.

Set ``THBCH_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("THBCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

basis_ders = _impl.basis_ders
nonlinear_local = _impl.nonlinear_local

__all__ = ["BACKEND", "basis_ders", "nonlinear_local"]
