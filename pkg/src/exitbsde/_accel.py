"""Numba detection and backend selection for the hot kernels.

The compiled and the pure-numpy kernel twins are written so that they
produce bit-identical results (elementwise updates only; all reductions
that feed them are precomputed with a fixed numpy reduction order).
Backend choice therefore affects speed, not output.

Selection order:
  * ``EXITBSDE_FORCE_NUMPY`` set -> numpy twins.
  * ``NUMBA_DISABLE_JIT`` set    -> numpy twins.
  * numba importable             -> compiled kernels.
"""

from __future__ import annotations

import os

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag instead
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # decorator stub so kernel modules always import
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


def numba_enabled() -> bool:
    """Whether compiled kernels are used for dispatch right now."""
    if "EXITBSDE_FORCE_NUMPY" in os.environ:
        return False
    if "NUMBA_DISABLE_JIT" in os.environ:
        return False
    return HAS_NUMBA


def resolve_backend(backend: str | None) -> str:
    """Normalize a backend request to ``"numba"`` or ``"numpy"``.

    ``None`` means auto-select from the environment.
    """
    if backend is None:
        return "numba" if numba_enabled() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend
