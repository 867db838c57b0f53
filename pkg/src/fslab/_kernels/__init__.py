"""Fused row kernels used by the autodiff engine.

The compiled module ``_fused`` is preferred; ``_numpy`` is a drop-in fallback
with identical signatures. Set ``FSLAB_PURE_PYTHON=1`` to force the fallback.

Every kernel takes C-contiguous float64 arrays shaped ``(rows, width)``.
"""

import os

from fslab._kernels import _numpy

BACKEND = "numpy"
_impl = _numpy

if os.environ.get("FSLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fslab._kernels import _fused as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _numpy

gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
log_softmax_forward = _impl.log_softmax_forward
log_softmax_backward = _impl.log_softmax_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward

__all__ = [
    "BACKEND",
    "gelu_forward",
    "gelu_backward",
    "softmax_forward",
    "softmax_backward",
    "log_softmax_forward",
    "log_softmax_backward",
    "layer_norm_forward",
    "layer_norm_backward",
]
