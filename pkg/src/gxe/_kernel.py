"""Selects the compiled REML kernel when it is importable, else the numpy one.

Set ``GXE_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from types import ModuleType

from gxe import _reml_py


def _load_compiled() -> ModuleType | None:
    try:
        from gxe import _reml_core
    except ImportError:
        return None
    return _reml_core


def get(name: str | None = None) -> ModuleType:
    """Return the kernel module named ``"cython"`` or ``"python"`` (default: best available)."""
    if name == "python":
        return _reml_py
    compiled = _load_compiled()
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernel gxe._reml_core is not built")
        return compiled
    if name is not None:
        raise ValueError(f"unknown kernel backend {name!r}")
    return compiled or _reml_py


_forced = os.environ.get("GXE_PURE_PYTHON", "") not in ("", "0")
kernel = _reml_py if _forced else get()
BACKEND = "python" if kernel is _reml_py else "cython"
