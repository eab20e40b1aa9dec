"""Hot numeric kernels (conv2d and maxpool forward/backward).

Two interchangeable implementations live here:

* ``numba_impl`` -- ``@njit`` loop kernels, parallelised over the batch
  dimension.  This is the default whenever numba imports cleanly.
* ``numpy_impl`` -- pure-numpy fallback built on shifted views and einsum.

Selection happens once at import time via the ``SGGV_BACKEND`` environment
variable: ``auto`` (default), ``numba`` or ``numpy``.  Both backends share
the same function signatures; ``benchmarks/bench_kernels.py`` compares them.
Results are deterministic within a backend but may differ between backends
in the last few ulps (different summation order).
"""

import os

_VALID = ("auto", "numba", "numpy")


def _load(choice):
    if choice not in _VALID:
        raise ValueError(
            f"SGGV_BACKEND must be one of {_VALID}, got {choice!r}")
    if choice == "numpy":
        from . import numpy_impl
        return numpy_impl, "numpy"
    if choice == "numba":
        from . import numba_impl
        return numba_impl, "numba"
    try:
        from . import numba_impl
        return numba_impl, "numba"
    except ImportError:
        from . import numpy_impl
        return numpy_impl, "numpy"


_impl, backend_name = _load(os.environ.get("SGGV_BACKEND", "auto").strip().lower())

pad_input = _impl.pad_input
conv2d_fwd = _impl.conv2d_fwd
conv2d_bwd = _impl.conv2d_bwd
conv2d_fwd_padded = _impl.conv2d_fwd_padded
conv2d_bwd_padded = _impl.conv2d_bwd_padded
reduce_rows = _impl.reduce_rows
maxpool_fwd = _impl.maxpool_fwd
maxpool_bwd = _impl.maxpool_bwd

__all__ = [
    "backend_name",
    "pad_input",
    "conv2d_fwd",
    "conv2d_bwd",
    "conv2d_fwd_padded",
    "conv2d_bwd_padded",
    "reduce_rows",
    "maxpool_fwd",
    "maxpool_bwd",
]
