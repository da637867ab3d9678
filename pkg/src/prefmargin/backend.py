"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``PREFMARGIN_BACKEND=python`` to force the fallback.
"""

import os

from . import _kernels_py

AVAILABLE = {"python": _kernels_py}

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None
else:
    AVAILABLE["cython"] = _compiled


def _select():
    wanted = os.environ.get("PREFMARGIN_BACKEND", "").strip().lower()
    if wanted == "python" or _compiled is None:
        return "python"
    if wanted and wanted not in AVAILABLE:
        raise ImportError(f"unknown PREFMARGIN_BACKEND {wanted!r}")
    return "cython"


NAME = _select()
kernels = AVAILABLE[NAME]


def get(name):
    """Return the kernel module for ``name`` ('python' or 'cython')."""
    if name not in AVAILABLE:
        raise KeyError(f"backend {name!r} not available; have {sorted(AVAILABLE)}")
    return AVAILABLE[name]

