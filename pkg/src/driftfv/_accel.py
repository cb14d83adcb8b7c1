"""Numba switch.

Set ``DRIFTFV_DISABLE_NUMBA=1`` to force the pure-numpy kernels (useful for
debugging and for the benchmark comparing both paths).
"""
import os

_FLAG = os.environ.get("DRIFTFV_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` with numba when enabled, otherwise return it unchanged."""
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func
