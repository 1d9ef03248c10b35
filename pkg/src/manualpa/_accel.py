"""Numba switch shared by the hot kernels.

Set ``MANUALPA_NUMBA=0`` to force the pure-numpy fallback paths (useful when
debugging, or on platforms without a working numba install).
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MANUALPA_NUMBA", "1").lower() not in {
    "0",
    "false",
    "no",
    "off",
}


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is present, else return it unchanged.

    fastmath stays off: several kernels promise bit-equality with plain-loop oracles.
    """
    if numba is None:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)
