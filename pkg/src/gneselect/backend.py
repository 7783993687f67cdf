"""Kernel backend selection.

Hot per-agent kernels are compiled with numba when it is importable and the
environment variable ``GNE_PURE_NUMPY`` is not set to ``1``.  The same source
runs un-compiled as the numpy fallback, so both backends share one
implementation and the monolithic / agent-net paths stay bit-identical
within a backend.  ``GNE_THREADS`` caps numba worker threads.
"""

import os

_PURE = os.environ.get("GNE_PURE_NUMPY", "0") == "1"

try:
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _PURE

if USE_NUMBA:
    _threads = os.environ.get("GNE_THREADS")
    if _threads:
        try:
            _numba.set_num_threads(max(1, min(int(_threads), _numba.config.NUMBA_NUM_THREADS)))
        except (ValueError, RuntimeError):
            pass


def maybe_njit(fn):
    """Compile ``fn`` with numba when the numba backend is active."""
    if USE_NUMBA:
        return _numba.njit(cache=True)(fn)
    return fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
