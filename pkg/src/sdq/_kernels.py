"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise, or when
``SDQ_PURE_PYTHON`` is set, the numpy implementation is used.
"""
import os

from . import _pykernels

if os.environ.get("SDQ_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

round_half_away = _impl.round_half_away
quantize_grid = _impl.quantize_grid
segment_sum = _impl.segment_sum
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
