"""Kernel backend selection.

The compiled extension is used when importable; ``EMAPRUNE_BACKEND=python``
forces the numpy fallback and ``EMAPRUNE_BACKEND=cython`` makes a missing
extension an error.
"""
import importlib
import logging
import os

logger = logging.getLogger(__name__)


def load_kernels(name=None):
    name = name or os.environ.get("EMAPRUNE_BACKEND", "auto")
    if name not in ("auto", "cython", "python"):
        raise ValueError(f"unknown backend {name!r}; expected auto, cython or python")
    if name in ("auto", "cython"):
        try:
            return importlib.import_module("emaprune._kernels")
        except ImportError:
            if name == "cython":
                raise
            logger.info("compiled kernels unavailable, using numpy fallback")
    return importlib.import_module("emaprune._kernels_py")


kernels = load_kernels()
BACKEND = kernels.BACKEND
