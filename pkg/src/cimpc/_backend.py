"""Kernel compilation switch.

Hot kernels are written once in a numba-compatible subset of numpy and
compiled with ``numba.njit`` unless ``CIMPC_NO_NUMBA`` is set to a truthy
value, in which case the undecorated Python functions are used as-is.
"""

import os

_FLAG = os.environ.get("CIMPC_NO_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and not NUMBA_DISABLED


def kernel(fn):
    """Compile ``fn`` with numba when enabled; return it untouched otherwise."""
    if not USE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def python_impl(fn):
    """The pure-Python body behind a (possibly compiled) kernel."""
    return getattr(fn, "py_func", fn)
