"""Backend selection for the loop kernels.

The compiled extension is used when it imports; otherwise, or when
``LESIONTRANSFER_PURE_PYTHON=1`` is set, the numpy fallbacks are used.
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    if os.environ.get("LESIONTRANSFER_PURE_PYTHON", "") in ("1", "true", "yes"):
        raise ImportError("pure-python backend forced")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_active = _compiled if _compiled is not None else _kernels_py


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` ("cython", "python" or None for the default)."""
    if name is None:
        return _active
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    return _compiled is not None
