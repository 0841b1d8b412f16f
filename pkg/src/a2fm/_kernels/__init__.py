"""Convolution kernels with a compiled fast path.

The Cython extension is used when it was built; otherwise the numpy
implementation in :mod:`a2fm._kernels.pykernels` is selected. Setting
``A2FM_KERNELS=python`` forces the fallback.
"""
import os

from . import pykernels

BACKEND = "python"
_impl = pykernels

if os.environ.get("A2FM_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = pykernels


def conv3d_forward(x, w, b):
    return _impl.conv3d_forward(x, w, b)


def conv3d_backward(x, w, gout, need_x=True, need_w=True):
    return _impl.conv3d_backward(x, w, gout, bool(need_x), bool(need_w))
