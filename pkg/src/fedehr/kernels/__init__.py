"""Hot-path kernels with a compiled core and a pure-numpy fallback.

The Cython extension is preferred when it imported cleanly; setting the
environment variable ``FEDEHR_PURE_PYTHON=1`` forces the numpy fallback.
Both backends follow the same accumulation order, so results agree bitwise
(asserted in tests/test_kernels.py).
"""

import os

from fedehr.kernels import _pykernels

if os.environ.get("FEDEHR_PURE_PYTHON", "") == "1":
    _impl = _pykernels
else:
    try:
        from fedehr.kernels import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND

embedding_bag_forward = _impl.embedding_bag_forward
embedding_bag_backward = _impl.embedding_bag_backward
segment_mean_forward = _impl.segment_mean_forward
segment_mean_backward = _impl.segment_mean_backward

__all__ = [
    "BACKEND",
    "embedding_bag_forward",
    "embedding_bag_backward",
    "segment_mean_forward",
    "segment_mean_backward",
]
