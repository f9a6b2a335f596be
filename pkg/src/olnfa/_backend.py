"""Pick the compiled kernels when available, else the numpy fallback.

Set ``OLNFA_PURE_PYTHON=1`` to force the fallback (benchmarks and the
backend-agreement tests do this per call through :func:`load`).
"""
from __future__ import annotations

import importlib
import logging
import os
from types import ModuleType

log = logging.getLogger(__name__)


def load(prefer_compiled: bool = True) -> ModuleType:
    if prefer_compiled:
        try:
            return importlib.import_module("olnfa._kernels")
        except ImportError as exc:  # extension not built
            log.debug("compiled kernels unavailable (%s); using numpy fallback", exc)
    return importlib.import_module("olnfa._fallback")


kernels = load(os.environ.get("OLNFA_PURE_PYTHON", "") not in ("1", "true", "yes"))
BACKEND = "compiled" if kernels.__name__.endswith("_kernels") else "python"
