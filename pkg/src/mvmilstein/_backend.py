"""Select the compute backend for the hot kernels.

Set ``MVMILSTEIN_DISABLE_NUMBA=1`` to force the pure-numpy path.  The flag is
read once at import time.
"""
import os

DISABLE_ENV = "MVMILSTEIN_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip().lower() not in ("1", "true", "yes", "on")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by environment")
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def njit_options():
    # fastmath off: the scheme must propagate NaN/Inf to its divergence flag
    return dict(cache=True, nogil=True, fastmath=False, error_model="numpy")
