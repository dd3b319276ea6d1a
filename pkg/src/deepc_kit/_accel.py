"""Backend selection for the hot numeric kernels.

The QP solver's ADMM iteration and the soft-arm integrator exist in two
functionally identical flavours: a numba ``@njit`` build and a pure
numpy/scipy build.  The active flavour is fixed at import time by the
``DEEPC_KIT_NUMBA`` environment variable:

    DEEPC_KIT_NUMBA=1     require numba (raise if it cannot be imported)
    DEEPC_KIT_NUMBA=0     force the pure-numpy path
    DEEPC_KIT_NUMBA=auto  use numba when available (default)

Both builds stay importable regardless of the flag so they can be
benchmarked against each other (see ``benchmarks/backend_bench.py``).
"""

from __future__ import annotations

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via DEEPC_KIT_NUMBA=0
    numba = None
    HAS_NUMBA = False

_ENV_VAR = "DEEPC_KIT_NUMBA"


def numba_enabled() -> bool:
    """Decide whether jitted kernels should be the active backend."""
    flag = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if flag in ("0", "off", "false", "no"):
        return False
    if flag in ("1", "on", "true", "yes"):
        if not HAS_NUMBA:
            raise RuntimeError(
                f"{_ENV_VAR}={flag!r} requires numba, which is not importable"
            )
        return True
    return HAS_NUMBA


def jit(func):
    """Compile ``func`` with numba when present; identity otherwise."""
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True)(func)


ACTIVE_BACKEND = "numba" if numba_enabled() else "numpy"
