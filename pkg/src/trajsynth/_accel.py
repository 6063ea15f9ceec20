"""Backend switch for the hot kernels.

Kernels in :mod:`trajsynth.kernels` come in two flavours: explicit loops
compiled with ``numba.njit`` and vectorized numpy equivalents. The numba path
is used when numba imports and the environment variable
``TRAJSYNTH_DISABLE_NUMBA`` is unset or ``0``. :func:`set_backend` overrides
the choice at runtime (tests and the benchmark run both paths side by side).
"""

from __future__ import annotations

import contextlib
import os

ENV_FLAG = "TRAJSYNTH_DISABLE_NUMBA"

try:
    import numba as _numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    NUMBA_AVAILABLE = False


def _env_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "0").strip().lower() not in ("", "0", "false", "no")


_use_numba = NUMBA_AVAILABLE and not _env_disabled()


def njit(fn=None, **kwargs):
    """Compile ``fn`` with numba if it is importable; identity otherwise."""

    def wrap(f):
        if not NUMBA_AVAILABLE:
            return f
        return _numba.njit(cache=True, **kwargs)(f)

    return wrap(fn) if fn is not None else wrap


def use_numba() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for subsequent kernel calls."""
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    _use_numba = name == "numba"


@contextlib.contextmanager
def backend(name: str):
    previous = "numba" if _use_numba else "numpy"
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)
