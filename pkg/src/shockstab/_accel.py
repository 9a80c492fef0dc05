"""Backend selection for the hot numerical kernels.

Kernels are compiled with numba unless ``SHOCKSTAB_NO_NUMBA`` is set to a
truthy value (or numba is not importable), in which case the pure-numpy
implementations in :mod:`shockstab.kernels` are used instead.
"""

import functools
import os

_FLAG = os.environ.get("SHOCKSTAB_NO_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _FLAG not in ("1", "true", "yes", "on")

if numba is not None:
    jit = functools.partial(numba.njit, cache=True, nogil=True)
else:  # pragma: no cover
    def jit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
