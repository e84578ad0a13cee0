"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
implementation takes over.  Set ``STFLOW_PURE_PYTHON=1`` to force the
fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

MALFORMED = _pykernels.MALFORMED

_backend = _pykernels
BACKEND = "python"
if not os.environ.get("STFLOW_PURE_PYTHON"):
    try:
        from . import _ckernels as _backend  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

parse_timestamps = _backend.parse_timestamps
bin_events = _backend.bin_events
haversine_matrix = _backend.haversine_matrix
glu_forward = _backend.glu_forward
glu_backward = _backend.glu_backward

__all__ = ["BACKEND", "MALFORMED", "parse_timestamps", "bin_events", "haversine_matrix",
           "glu_forward", "glu_backward"]
