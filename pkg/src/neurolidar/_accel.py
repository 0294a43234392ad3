"""Numba dispatch.

Hot loops are written once as plain Python over numpy arrays and compiled with
``numba.njit`` unless ``NEUROLIDAR_NO_NUMBA`` is set to a truthy value (or numba
is not importable). Every compiled kernel keeps a pure-numpy twin so the two
paths can be benchmarked and cross-checked.
"""
import os

_FLAG = os.environ.get("NEUROLIDAR_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("disabled by NEUROLIDAR_NO_NUMBA")
    import numba
    NUMBA_AVAILABLE = True
except ImportError:
    numba = None
    NUMBA_AVAILABLE = False


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is enabled; identity otherwise."""
    if NUMBA_AVAILABLE:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def use_numba():
    return NUMBA_AVAILABLE
