"""Batched adapt-and-evaluate kernel over (parameter vector, task) pairs.

The compiled backend is used when it was built; otherwise the numpy
backend.  Set ``PACBUS_PURE=1`` to force the numpy backend.
"""

import os

from . import _py

try:
    if os.environ.get("PACBUS_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _ext
except ImportError:
    _ext = None

BACKENDS = {"python": _py.adapt_eval}
if _ext is not None:
    BACKENDS["compiled"] = _ext.adapt_eval

BACKEND = "compiled" if _ext is not None else "python"
adapt_eval = BACKENDS[BACKEND]


def thread_count() -> int:
    """Worker threads for the compiled backend, capped by PACBUS_THREADS."""
    cap = os.environ.get("PACBUS_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"PACBUS_THREADS must be an integer, got {cap!r}") from None
    return n


__all__ = ["adapt_eval", "BACKEND", "BACKENDS", "thread_count"]
