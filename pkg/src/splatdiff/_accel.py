"""Backend switch for the compiled kernels.

Hot loops (kd-tree build/query, blocked reductions) are written once with
numba in mind. Setting ``SPLATDIFF_NO_NUMBA=1`` in the environment, or calling
:func:`set_backend("numpy")`, routes every kernel through its pure-numpy
implementation instead. The switch is consulted at call time so tests and the
benchmark can flip it inside one process.
"""

from __future__ import annotations

import functools
import os
import warnings

try:
    import numba

    NUMBA_AVAILABLE = True
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_FLAG = "SPLATDIFF_NO_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


_use_numba = NUMBA_AVAILABLE and not _env_disabled()


def use_numba() -> bool:
    return _use_numba


def backend() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


def set_num_threads(n: int | None) -> None:
    """Cap kernel parallelism. ``None`` leaves numba's default in place."""
    if n is None or not NUMBA_AVAILABLE:
        return
    if n < 1:
        raise ValueError("thread count must be >= 1")
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


if NUMBA_AVAILABLE:
    njit = functools.partial(numba.njit, cache=True, nogil=True)
    prange = numba.prange
else:  # pragma: no cover
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

    prange = range
