"""Kernel backend selection.

The compiled extension (_core) is preferred when importable; the numpy
reference (_ref) is the fallback. Both produce bit-identical outputs.
KVROT_BACKEND=numpy|cython forces a backend; forcing cython when the
extension is missing raises ImportError rather than silently degrading.
"""

from __future__ import annotations

import os

from . import _ref

_requested = os.environ.get("KVROT_BACKEND", "").strip().lower()

if _requested in ("", "auto"):
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _ref
        BACKEND = "numpy"
elif _requested in ("cython", "compiled"):
    from . import _core as _impl

    BACKEND = "cython"
elif _requested in ("numpy", "ref", "python"):
    _impl = _ref
    BACKEND = "numpy"
else:
    raise ImportError(f"unknown KVROT_BACKEND value: {_requested!r}")

fwht_rows = _impl.fwht_rows
pack_rows = _impl.pack_rows
unpack_rows = _impl.unpack_rows
quantize_rows = _impl.quantize_rows
dequantize_rows = _impl.dequantize_rows


def get_backend() -> str:
    """Name of the active kernel backend: 'cython' or 'numpy'."""
    return BACKEND


def available_backends() -> dict:
    """Map of backend name -> kernel module, for benchmarks and tests."""
    out = {"numpy": _ref}
    try:
        from . import _core

        out["cython"] = _core
    except ImportError:
        pass
    return out
