"""Hot kernels behind the convolution and pooling ops.

The compiled extension is used when it was built; otherwise the NumPy
fallback is selected at import. Set ``TBCNN_KERNELS=numpy`` to force the
fallback, or ``TBCNN_KERNELS=compiled`` to fail loudly if the extension is
missing.
"""

import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

_choice = os.environ.get("TBCNN_KERNELS", "auto").lower()
if _choice not in ("auto", "numpy", "compiled"):
    raise ImportError(f"TBCNN_KERNELS must be auto, numpy or compiled, got {_choice!r}")

_impl = _numpy
BACKEND = "numpy"
if _choice != "numpy":
    try:
        from . import _compiled as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        logger.info("compiled kernels unavailable, using NumPy fallback")

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
relu_backward = _impl.relu_backward
adam_update = _impl.adam_update
relu_squeeze = _impl.relu_squeeze
scale_grad = _impl.scale_grad
relu_squeeze_scale_grad = _impl.relu_squeeze_scale_grad

__all__ = [
    "adam_update",
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "depthwise_forward",
    "depthwise_backward",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "relu_backward",
    "relu_squeeze",
    "relu_squeeze_scale_grad",
    "scale_grad",
]
