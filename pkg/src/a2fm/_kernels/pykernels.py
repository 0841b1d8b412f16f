"""Pure-numpy reference for the convolution kernels.

Same contract as the compiled module: channels-last 5D input
``(B, T, W, H, Ci)``, weights ``(kt, kw, kh, Ci, Co)``, stride 1 and zero
'same' padding for odd kernel extents.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, kt, kw, kh):
    return np.pad(x, ((0, 0), (kt // 2,) * 2, (kw // 2,) * 2, (kh // 2,) * 2, (0, 0)))


def _windows(x, kt, kw, kh):
    # -> (B, T, W, H, Ci, kt, kw, kh)
    return sliding_window_view(_pad(x, kt, kw, kh), (kt, kw, kh), axis=(1, 2, 3))


def conv3d_forward(x, w, b):
    kt, kw, kh = w.shape[:3]
    win = _windows(x, kt, kw, kh)
    out = np.tensordot(win, w, axes=([4, 5, 6, 7], [3, 0, 1, 2]))
    out += b
    return np.ascontiguousarray(out)


def conv3d_backward(x, w, gout, need_x, need_w):
    kt, kw, kh = w.shape[:3]
    gx = gw = gb = None
    if need_x:
        flipped = np.ascontiguousarray(w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
        gx = conv3d_forward(gout, flipped, np.zeros(w.shape[3]))
    if need_w:
        win = _windows(x, kt, kw, kh)
        gw = np.tensordot(win, gout, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        gw = np.ascontiguousarray(gw.transpose(1, 2, 3, 0, 4))
        gb = gout.sum(axis=(0, 1, 2, 3))
    return gx, gw, gb
