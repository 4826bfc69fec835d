"""Backend selection for the GRU recurrence kernels.

The compiled extension is used when it was built; set ``GNMR_PURE_PYTHON=1``
to force the numpy fallback (useful for benchmarking and debugging).
"""

import os

from . import _gru_ref

if os.environ.get("GNMR_PURE_PYTHON", "") not in ("", "0"):
    _impl = _gru_ref
    BACKEND = "python"
else:
    try:
        from . import _gru_kernels as _impl
    except ImportError:
        _impl = _gru_ref
        BACKEND = "python"
    else:
        BACKEND = "cython"

gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward

__all__ = ["BACKEND", "gru_forward", "gru_backward"]
