"""Backend switch for the hot kernels.

Every kernel in the package has a numba ``@njit`` implementation and a
pure-numpy fallback.  The numba path is used when numba imports cleanly and
the environment variable ``DMN_DISABLE_NUMBA`` is unset (or ``0``).  Tests
and the benchmark flip the backend at runtime with :func:`use_numba`.
"""
import contextlib
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency
    numba = None
    HAVE_NUMBA = False

_DISABLED = os.environ.get("DMN_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes", "on")
_enabled = HAVE_NUMBA and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when available, identity otherwise."""
    kwargs.setdefault("cache", True)

    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def numba_enabled():
    return _enabled


def set_numba(flag):
    """Select the numba backend (``True``) or the numpy fallback."""
    global _enabled
    _enabled = bool(flag) and HAVE_NUMBA
    return _enabled


@contextlib.contextmanager
def use_numba(flag):
    previous = _enabled
    set_numba(flag)
    try:
        yield
    finally:
        set_numba(previous)


def dispatch(nb_impl, np_impl):
    """Return the implementation matching the current backend."""
    return nb_impl if _enabled else np_impl


def backend_name():
    return "numba" if _enabled else "numpy"
