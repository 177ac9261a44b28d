"""Optional numba acceleration.

Set ``SMSUBU_DISABLE_NUMBA=1`` to run every kernel through its pure numpy path.
"""
import os

DISABLED = os.environ.get("SMSUBU_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False
    _njit = None


def njit(fn):
    """Compile ``fn`` with numba when available and enabled; otherwise return it unchanged."""
    if HAS_NUMBA:
        return _njit(cache=True, nogil=True)(fn)
    return fn
