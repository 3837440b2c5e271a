"""Kernel backend selection and worker-count control.

The hot numeric kernels exist twice: a numba ``@njit`` implementation (the
default) and a pure-numpy fallback. ``ANC_BACKEND=numpy`` forces the
fallback; ``ANC_BACKEND=numba`` insists on numba and fails loudly if it is
unavailable. Worker counts come from ``--threads`` / ``ANC_THREADS`` and
only ever cap parallelism: kernels assign each output element to exactly
one worker, so results are bit-identical for every thread count.
"""

from __future__ import annotations

import os

from .errors import InvalidArgumentError

_VALID = ("numba", "numpy")


def _detect() -> str:
    choice = os.environ.get("ANC_BACKEND", "").strip().lower()
    if choice and choice not in _VALID:
        raise InvalidArgumentError(
            f"ANC_BACKEND must be one of {_VALID}, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise InvalidArgumentError("ANC_BACKEND=numba but numba is not installed")
        return "numpy"
    return "numba"


_ACTIVE = _detect()


def active_backend() -> str:
    return _ACTIVE


def set_backend(name: str) -> None:
    """Switch backends at runtime (used by the benchmark harness and tests)."""
    global _ACTIVE
    if name not in _VALID:
        raise InvalidArgumentError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba":
        import numba  # noqa: F401
    _ACTIVE = name


def default_threads() -> int:
    env = os.environ.get("ANC_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InvalidArgumentError(f"ANC_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise InvalidArgumentError("ANC_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def set_threads(n: int) -> int:
    """Cap kernel workers at ``n``; returns the effective count."""
    if n < 1:
        raise InvalidArgumentError("thread count must be >= 1")
    if _ACTIVE == "numba":
        import numba

        eff = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(eff)
        return eff
    return 1
