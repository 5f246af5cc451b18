"""Switch between numba-compiled kernels and the pure-numpy fallback.

Set ``VMBLIMIT_DISABLE_NUMBA=1`` to force the numpy path. The flag is read
once at import time.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("VMBLIMIT_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the bundled TBB is too old on some hosts; OpenMP avoids a noisy fallback warning
        numba.config.THREADING_LAYER = "omp"
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if args and callable(args[0]):
        return args[0]
    return wrap


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def set_threads(n: int | None) -> None:
    """Cap numba worker threads; no-op without numba or when n is None."""
    if n and HAVE_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
