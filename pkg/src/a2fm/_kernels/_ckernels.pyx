# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels (channels-last, stride 1, zero 'same' padding).

All arrays are C-contiguous, so the loops walk raw pointers: a channel row of
``x`` or ``gout`` is contiguous, as is the ``(Ci, Co)`` block of ``w`` for one
kernel tap.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv3d_forward(const double[:, :, :, :, ::1] x,
                   const double[:, :, :, :, ::1] w,
                   const double[::1] b):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], W = x.shape[2], H = x.shape[3]
    cdef Py_ssize_t Ci = x.shape[4]
    cdef Py_ssize_t kt = w.shape[0], kw = w.shape[1], kh = w.shape[2], Co = w.shape[4]
    cdef Py_ssize_t pt = kt // 2, pw = kw // 2, ph = kh // 2
    cdef Py_ssize_t n, t, i, j, a, c, d, ci, o, tt, ii, jj
    cdef Py_ssize_t sx_t = W * H * Ci, sx_w = H * Ci, sx_n = T * sx_t
    cdef Py_ssize_t sw_a = kw * kh * Ci * Co, sw_c = kh * Ci * Co, sw_d = Ci * Co
    cdef double xv
    cdef const double* xp
    cdef const double* wp
    cdef const double* wrow
    cdef double* op
    out_arr = np.empty((B, T, W, H, Co), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    if out_arr.size == 0 or x.size == 0:
        out_arr[...] = np.asarray(b)
        return out_arr
    with nogil:
        for n in range(B):
            for t in range(T):
                for i in range(W):
                    for j in range(H):
                        op = &out[n, t, i, j, 0]
                        for o in range(Co):
                            op[o] = b[o]
                        for a in range(kt):
                            tt = t + a - pt
                            if tt < 0 or tt >= T:
                                continue
                            for c in range(kw):
                                ii = i + c - pw
                                if ii < 0 or ii >= W:
                                    continue
                                for d in range(kh):
                                    jj = j + d - ph
                                    if jj < 0 or jj >= H:
                                        continue
                                    xp = &x[0, 0, 0, 0, 0] + n * sx_n + tt * sx_t + ii * sx_w + jj * Ci
                                    wp = &w[0, 0, 0, 0, 0] + a * sw_a + c * sw_c + d * sw_d
                                    for ci in range(Ci):
                                        xv = xp[ci]
                                        if xv == 0.0:
                                            continue
                                        wrow = wp + ci * Co
                                        for o in range(Co):
                                            op[o] += xv * wrow[o]
    return out_arr


def conv3d_backward(const double[:, :, :, :, ::1] x,
                    const double[:, :, :, :, ::1] w,
                    const double[:, :, :, :, ::1] gout,
                    bint need_x, bint need_w):
    """Return (grad_x, grad_w, grad_b); entries not requested are None."""
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], W = x.shape[2], H = x.shape[3]
    cdef Py_ssize_t Ci = x.shape[4]
    cdef Py_ssize_t kt = w.shape[0], kw = w.shape[1], kh = w.shape[2], Co = w.shape[4]
    cdef Py_ssize_t pt = kt // 2, pw = kw // 2, ph = kh // 2
    cdef Py_ssize_t n, t, i, j, a, c, d, ci, o, tt, ii, jj
    cdef Py_ssize_t sx_t = W * H * Ci, sx_w = H * Ci, sx_n = T * sx_t
    cdef Py_ssize_t sw_a = kw * kh * Ci * Co, sw_c = kh * Ci * Co, sw_d = Ci * Co
    cdef double acc, xv
    cdef const double* gp
    cdef const double* wp
    cdef const double* wrow
    cdef const double* xp
    cdef double* gxp
    cdef double* gwp
    cdef double* gwrow
    gx_arr = np.zeros((B, T, W, H, Ci), dtype=np.float64) if need_x else None
    gw_arr = np.zeros((kt, kw, kh, Ci, Co), dtype=np.float64) if need_w else None
    gb_arr = np.zeros(Co, dtype=np.float64) if need_w else None
    if x.size == 0 or gout.size == 0 or w.size == 0:
        return gx_arr, gw_arr, gb_arr
    cdef double[:, :, :, :, ::1] gx
    cdef double[:, :, :, :, ::1] gw
    cdef double[::1] gb
    cdef double* gx0 = NULL
    cdef double* gw0 = NULL
    cdef double* gb0 = NULL
    if need_x:
        gx = gx_arr
        gx0 = &gx[0, 0, 0, 0, 0]
    if need_w:
        gw = gw_arr
        gb = gb_arr
        gw0 = &gw[0, 0, 0, 0, 0]
        gb0 = &gb[0]
    cdef const double* x0 = &x[0, 0, 0, 0, 0]
    cdef const double* w0 = &w[0, 0, 0, 0, 0]
    with nogil:
        for n in range(B):
            for t in range(T):
                for i in range(W):
                    for j in range(H):
                        gp = &gout[n, t, i, j, 0]
                        if need_w:
                            for o in range(Co):
                                gb0[o] += gp[o]
                        for a in range(kt):
                            tt = t + a - pt
                            if tt < 0 or tt >= T:
                                continue
                            for c in range(kw):
                                ii = i + c - pw
                                if ii < 0 or ii >= W:
                                    continue
                                for d in range(kh):
                                    jj = j + d - ph
                                    if jj < 0 or jj >= H:
                                        continue
                                    wp = w0 + a * sw_a + c * sw_c + d * sw_d
                                    if need_x:
                                        gxp = gx0 + n * sx_n + tt * sx_t + ii * sx_w + jj * Ci
                                        for ci in range(Ci):
                                            wrow = wp + ci * Co
                                            acc = 0.0
                                            for o in range(Co):
                                                acc += wrow[o] * gp[o]
                                            gxp[ci] += acc
                                    if need_w:
                                        xp = x0 + n * sx_n + tt * sx_t + ii * sx_w + jj * Ci
                                        gwp = gw0 + a * sw_a + c * sw_c + d * sw_d
                                        for ci in range(Ci):
                                            xv = xp[ci]
                                            if xv == 0.0:
                                                continue
                                            gwrow = gwp + ci * Co
                                            for o in range(Co):
                                                gwrow[o] += xv * gp[o]
    return gx_arr, gw_arr, gb_arr
