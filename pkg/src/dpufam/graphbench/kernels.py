"""Kernel backend selection.

The compiled extension is used when it imports; setting
``DPUFAM_KERNELS=python`` forces the numpy fallback.
"""
import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}
try:
    from . import _kernels_ext
except ImportError:  # extension not built
    _kernels_ext = None
else:
    BACKENDS["compiled"] = _kernels_ext

_requested = os.environ.get("DPUFAM_KERNELS", "").lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"kernel backend {_requested!r} unavailable; have {sorted(BACKENDS)}")
BACKEND = _requested or ("compiled" if "compiled" in BACKENDS else "python")
active = BACKENDS[BACKEND]


def get(name=None):
    return BACKENDS[name or BACKEND]
