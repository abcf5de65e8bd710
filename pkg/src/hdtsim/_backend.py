"""Backend selection for the simulation step loop.

``HDTSIM_BACKEND`` may be ``auto`` (default), ``compiled`` or ``python``.
``auto`` uses the compiled kernel when the extension imports cleanly.
"""
from __future__ import annotations

import os

try:
    from . import _ckernel
except ImportError:  # extension not built
    _ckernel = None

CHOICES = ("auto", "compiled", "python")


def compiled_kernel():
    return _ckernel


def has_compiled() -> bool:
    return _ckernel is not None


def resolve(requested: str | None = None) -> str:
    """Name of the backend to use: ``"compiled"`` or ``"python"``."""
    choice = (requested or os.environ.get("HDTSIM_BACKEND", "auto")).strip().lower()
    if choice not in CHOICES:
        raise ValueError(f"unknown backend {choice!r}; expected one of {CHOICES}")
    if choice == "compiled":
        if _ckernel is None:
            raise RuntimeError("compiled backend requested but hdtsim._ckernel is not built")
        return "compiled"
    if choice == "python":
        return "python"
    return "compiled" if _ckernel is not None else "python"


DEFAULT = resolve()
