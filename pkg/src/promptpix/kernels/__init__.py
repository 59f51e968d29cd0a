"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The active backend is chosen once at import time from the environment
variable ``PROMPTPIX_BACKEND``:

* ``numba`` - require the JIT kernels (raises if numba is unavailable)
* ``numpy`` - force the pure-numpy implementations
* ``auto``  - numba if importable, numpy otherwise (default)

Both backends produce identical results for identical inputs; the numpy
path exists so the package stays usable (and testable) without a working
JIT, and so the benchmark in :mod:`promptpix.kernels.bench` has a
baseline to compare against.
"""

import os

from . import _numpy as _np_impl

_CHOICE = os.environ.get("PROMPTPIX_BACKEND", "auto").lower()

if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(f"PROMPTPIX_BACKEND must be auto|numba|numpy, got {_CHOICE!r}")

if _CHOICE == "numpy":
    _impl = _np_impl
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _nb_impl

        _impl = _nb_impl
        BACKEND = "numba"
    except ImportError:
        if _CHOICE == "numba":
            raise
        _impl = _np_impl
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
scatter_add_rows = _impl.scatter_add_rows

__all__ = ["BACKEND", "im2col", "col2im", "scatter_add_rows"]
