"""Numba / NumPy backend selection for the hot kernels.

The package ships two implementations of every hot kernel: an explicit-loop
version compiled with ``numba.njit`` and a vectorized pure-NumPy fallback.
Which one is bound to the public kernel names in :mod:`patchguard.kernels`
is decided once, at import time:

* ``PATCHGUARD_NUMBA=0`` (or ``false``/``off``) forces the NumPy path;
* otherwise numba is used when it imports cleanly.

``benchmarks/bench_kernels.py`` times both paths side by side.
"""

import os

__all__ = ["USE_NUMBA", "NUMBA_AVAILABLE", "njit"]


def _env_wants_numba() -> bool:
    raw = os.environ.get("PATCHGUARD_NUMBA", "1").strip().lower()
    return raw not in ("0", "false", "off", "no")


try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised via PATCHGUARD_NUMBA=0
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _env_wants_numba()


def njit(func):
    """Compile with numba when the accelerated path is active.

    Compiled kernels are cached on disk so repeated runs skip compilation.
    """
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
