"""Optional numba acceleration.

Every hot loop in the package exists twice: an ``@njit`` kernel and a plain
numpy implementation with the same signature.  Dispatch happens at call time,
so ``STOCHQHO_BACKEND=numpy`` (or a missing numba install) switches the whole
package to the reference path without reimporting anything.
"""
import os

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend():
    """Active backend name: ``"numba"`` or ``"numpy"``."""
    if not HAS_NUMBA:
        return "numpy"
    val = os.environ.get("STOCHQHO_BACKEND", "numba").strip().lower()
    return "numpy" if val in ("numpy", "python", "off", "0") else "numba"


def use_numba():
    return backend() == "numba"
