"""Backend selection for the hot loops.

The compiled extension is used when importable. Set ``FEDSURV_BACKEND=python``
to force the numpy fallback (``cython`` to require the extension).
"""
import os

from . import _pykernels

_requested = os.environ.get("FEDSURV_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _pykernels
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _pykernels

BACKEND = _impl.BACKEND
scaled_km = _impl.scaled_km
pseudo_values = _impl.pseudo_values
cindex_counts = _impl.cindex_counts


def available_backends():
    """Map backend name to kernel module for every importable backend."""
    found = {"python": _pykernels}
    try:
        from . import _kernels

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
