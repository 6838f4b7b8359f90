"""Hot-loop kernels: compiled extension when available, numpy otherwise.

The active backend is reported by BACKEND ("compiled" or "python").
Set MLTR_FORCE_PYTHON=1 to ignore the extension, e.g. for benchmarking.
"""
import os

from mltr.kernels import slow

if os.environ.get("MLTR_FORCE_PYTHON"):
    _impl = slow
    BACKEND = "python"
else:
    try:
        from mltr.kernels import _fast as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = slow
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
scatter_add_rows = _impl.scatter_add_rows
clahe_apply = _impl.clahe_apply
