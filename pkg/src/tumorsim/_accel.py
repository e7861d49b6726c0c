"""Optional numba acceleration.

Every hot kernel in the package exists twice: an ``@njit`` loop version and
a vectorised numpy version. Which one runs is decided at call time by
:func:`use_numba`, so the flag can be flipped inside a process (tests and
the benchmark do this).

Set ``TUMORSIM_DISABLE_NUMBA=1`` to force the numpy path.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_ENV_FLAG = "TUMORSIM_DISABLE_NUMBA"
_forced = None


def njit(*args, **kwargs):
    """``numba.njit`` with nogil+cache defaults; identity decorator without numba."""
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def use_numba():
    if _forced is not None:
        return _forced
    if numba is None:
        return False
    return os.environ.get(_ENV_FLAG, "").strip().lower() not in ("1", "true", "yes")


def set_backend(name):
    """Force ``"numba"`` or ``"numpy"``; ``None`` returns control to the env flag."""
    global _forced
    if name is None:
        _forced = None
    elif name == "numba":
        if numba is None:
            raise RuntimeError("numba is not installed")
        _forced = True
    elif name == "numpy":
        _forced = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend():
    return "numba" if use_numba() else "numpy"
