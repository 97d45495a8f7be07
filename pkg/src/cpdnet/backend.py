"""Kernel backend selection.

The hot kernels exist twice: BLAS-backed numpy implementations
(kernels_numpy) and numba-compiled loops (kernels_numba).  The active
backend is chosen once at import time from the CPDNET_BACKEND environment
variable ("numpy" or "numba").  Unset, it defaults to numpy: on this
model's desk-scale tensors the im2col matmuls beat the jitted loops on
convolution by a wide margin (see benchmarks/bench_backends.py), and
convolution dominates.  The numba path stays fully supported and wins on
pooling/upsampling.  ``use()`` switches at runtime (tests, benchmark).
"""

import os
from contextlib import contextmanager

from . import kernels_numpy

_BACKENDS = {"numpy": kernels_numpy}

try:
    from . import kernels_numba
    _BACKENDS["numba"] = kernels_numba
except ImportError:  # pragma: no cover - exercised only without numba
    kernels_numba = None


def _initial_backend() -> str:
    requested = os.environ.get("CPDNET_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            if requested == "numba":
                raise ImportError("CPDNET_BACKEND=numba but numba is not importable")
            raise ValueError(f"unknown CPDNET_BACKEND {requested!r}; choose numpy or numba")
        return requested
    return "numpy"


_active = _initial_backend()


def active() -> str:
    """Name of the backend currently in use."""
    return _active


def kernels():
    """The active kernel module."""
    return _BACKENDS[_active]


def available() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    _active = name


@contextmanager
def use(name: str):
    """Temporarily switch backends."""
    prev = _active
    set_backend(name)
    try:
        yield _BACKENDS[name]
    finally:
        set_backend(prev)
