"""Kernel backend selection.

Hot inner loops ship in two builds: a numba ``@njit`` version and a
numpy/scipy fallback.  The backend is chosen once at import time: the
fallback is used when numba cannot be imported or when the environment
variable ``ABN_NO_NUMBA`` is set to anything other than ``""`` or ``"0"``.

Both builds implement the same contract and agree to floating-point noise;
``benchmarks/bench_kernels.py`` times them against each other.
"""

import os

DISABLE_ENV = "ABN_NO_NUMBA"

try:
    from numba import njit  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via ABN_NO_NUMBA instead
    HAS_NUMBA = False
    njit = None


def numba_disabled_by_env() -> bool:
    return os.environ.get(DISABLE_ENV, "") not in ("", "0")


USE_NUMBA = HAS_NUMBA and not numba_disabled_by_env()
