"""Kernel backend selection.

Hot numeric kernels ship in two variants: numba @njit loops and a pure
numpy fallback.  Set VARDA_DISABLE_NUMBA=1 to force the numpy path (also
used automatically when numba is unavailable).
"""

import os

_DISABLED = os.environ.get("VARDA_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

if _DISABLED:
    NUMBA_ENABLED = False
else:
    try:
        import numba  # noqa: F401
        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover
        NUMBA_ENABLED = False


def njit(func):
    """numba.njit(cache=True) when enabled, identity otherwise."""
    if NUMBA_ENABLED:
        from numba import njit as _njit
        return _njit(cache=True)(func)
    return func
