"""Hot-kernel backend selection.

The compiled extension (``_native``) is preferred when importable; otherwise
the numpy fallback is used. Set ``WSIREPORT_PURE_PYTHON=1`` to force the
fallback, e.g. to compare results or benchmark (see benchmarks/bench_kernels.py).
Both backends implement the same contracts: ``topk_dot`` and ``lloyd_step``.
"""

import importlib
import os

from . import _fallback

_native = None
if os.environ.get("WSIREPORT_PURE_PYTHON", "0") in ("", "0"):
    try:
        _native = importlib.import_module("._native", __name__)
    except ImportError:
        _native = None

if _native is not None:
    BACKEND = "native"
    topk_dot = _native.topk_dot
    lloyd_step = _native.lloyd_step
else:
    BACKEND = "python"
    topk_dot = _fallback.topk_dot
    lloyd_step = _fallback.lloyd_step

__all__ = ["BACKEND", "topk_dot", "lloyd_step"]
