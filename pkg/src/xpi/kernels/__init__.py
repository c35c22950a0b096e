"""Kernel backend selection.

The compiled extension is preferred; the pure-numpy fallback is used
when the extension is unavailable or XPI_PURE is set to a non-empty
value other than "0".
"""

import os

from xpi.kernels import _ref

if os.environ.get("XPI_PURE", "") not in ("", "0"):
    _impl = _ref
    BACKEND = "fallback"
else:
    try:
        from xpi.kernels import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _ref
        BACKEND = "fallback"

matmul_u64 = _impl.matmul_u64
dconv3x3_u64 = _impl.dconv3x3_u64


def available_backends() -> dict:
    """Name -> module for every backend importable in this process."""
    backends = {"fallback": _ref}
    try:
        from xpi.kernels import _core

        backends["compiled"] = _core
    except ImportError:
        pass
    return backends
