"""Hot kernels for convolution, pooling and per-channel affine normalization.

The compiled Cython module is used when it imports; otherwise the numpy
fallback in ``_pykernels`` is selected. Setting ``NORMSHIFT_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("NORMSHIFT_PURE_PYTHON", "") not in ("1", "true"):
    _impl = compiled_backend
    BACKEND = "cython"
else:
    _impl = python_backend
    BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
affine_forward = _impl.affine_forward
affine_backward = _impl.affine_backward

__all__ = [
    "BACKEND", "compiled_backend", "python_backend",
    "im2col", "col2im", "maxpool_forward", "maxpool_backward", "affine_forward", "affine_backward",
]
