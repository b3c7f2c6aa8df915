"""Event kernel with a compiled backend and a pure-Python fallback.

The backend is chosen once at import: the Cython extension when it is
built, otherwise the Python loop.  ``TCSIM_BACKEND=python`` (or
``cython``) forces a choice; forcing ``cython`` without the extension is
an import error.  Both backends return identical arrays.
"""

from __future__ import annotations

import os

from . import _pykernel
from ._layout import (
    EVENT_DTYPE,
    HIT_DTYPE,
    KEEP_CODES,
    RECORD_DTYPE,
    KernelParams,
    concat_batches,
    empty_batch,
)

try:
    from . import _ckernel
except ImportError:  # extension not built
    _ckernel = None

BACKENDS = {"python": _pykernel}
if _ckernel is not None:
    BACKENDS["cython"] = _ckernel


def _select():
    want = os.environ.get("TCSIM_BACKEND", "auto").strip().lower()
    if want in ("", "auto"):
        return _ckernel if _ckernel is not None else _pykernel
    if want not in ("python", "cython"):
        raise ImportError(f"TCSIM_BACKEND must be auto, python or cython, not {want!r}")
    if want == "cython" and _ckernel is None:
        raise ImportError("TCSIM_BACKEND=cython but the compiled kernel is not built")
    return BACKENDS[want]


_backend = _select()
BACKEND = _backend.NAME


def get_backend(name: str | None = None):
    """Backend module by name (None = the one selected at import)."""
    if name is None:
        return _backend
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} is not available; have {sorted(BACKENDS)}") from None


def simulate_batch(params: KernelParams, start: int, count: int, backend: str | None = None) -> dict:
    return get_backend(backend).simulate_batch(params, start, count)


def sample_theta_batch(k, n, seed, backend=None):
    return get_backend(backend).sample_theta_batch(k, n, seed)


def sample_phi_batch(k, theta, n, seed, backend=None):
    return get_backend(backend).sample_phi_batch(k, theta, n, seed)


def sample_dphi_batch(k1, theta1, k2p, theta2p, n, seed, backend=None):
    return get_backend(backend).sample_dphi_batch(k1, theta1, k2p, theta2p, n, seed)


__all__ = [
    "BACKEND", "BACKENDS", "KernelParams", "simulate_batch", "sample_theta_batch",
    "sample_phi_batch", "sample_dphi_batch", "get_backend", "RECORD_DTYPE", "EVENT_DTYPE",
    "HIT_DTYPE", "KEEP_CODES", "concat_batches", "empty_batch",
]
