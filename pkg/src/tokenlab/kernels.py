"""Kernel dispatch: the compiled extension when it imports, numpy otherwise.

Set ``TOKENLAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as python_impl

BACKEND = "python"
compiled_impl = None

if not os.environ.get("TOKENLAB_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        compiled_impl = None

_impl = compiled_impl if compiled_impl is not None else python_impl

fnv1a64 = _impl.fnv1a64
scatter_add_rows = _impl.scatter_add_rows
signed_rank_counts = _impl.signed_rank_counts

__all__ = ["BACKEND", "fnv1a64", "scatter_add_rows", "signed_rank_counts",
           "python_impl", "compiled_impl"]
