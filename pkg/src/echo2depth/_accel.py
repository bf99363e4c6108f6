"""Numba switch.

Hot simulator kernels come in two flavours, an ``@njit`` loop version and a
vectorised numpy version.  ``ECHO2DEPTH_NUMBA=0`` forces the numpy path; numba
is also skipped silently when it cannot be imported.
"""
import os

_FLAG = os.environ.get("ECHO2DEPTH_NUMBA", "1").strip().lower()

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        import numba

        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap
