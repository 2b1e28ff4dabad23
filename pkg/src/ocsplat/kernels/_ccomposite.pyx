# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compositing kernels.

Same contract as ``_pycomposite``.  Pixels are processed in parallel; each
pixel writes its own row of per-splat partials and the partials are reduced
serially in pixel order, so results do not depend on the thread count.
"""

import numpy as np
from cython.parallel import prange
from libc.math cimport exp

cdef double T_MIN = 1e-4


def composite_forward(double[::1] mean, double[::1] var, double[::1] opacity,
                      double[:, ::1] color, double[::1] oc, int width,
                      double[::1] background, int threads=1):
    cdef Py_ssize_t n = mean.shape[0]
    image_a = np.empty((width, 3))
    oc_a = np.zeros(width)
    wsum_a = np.zeros(width)
    tfin_a = np.empty(width)
    nused_a = np.zeros(width, dtype=np.int32)
    cdef double[:, ::1] image = image_a
    cdef double[::1] oc_img = oc_a
    cdef double[::1] wsum = wsum_a
    cdef double[::1] tfin = tfin_a
    cdef int[::1] nused = nused_a
    cdef Py_ssize_t x, k
    cdef double t, a, dx, w, r, gg, b, o, s
    cdef int used
    for x in prange(width, nogil=True, num_threads=threads, schedule="static"):
        t = 1.0
        r = 0.0
        gg = 0.0
        b = 0.0
        o = 0.0
        s = 0.0
        used = 0
        for k in range(n):
            if t < T_MIN:
                break
            dx = x - mean[k]
            a = opacity[k] * exp(-0.5 * dx * dx / var[k])
            w = a * t
            r = r + w * color[k, 0]
            gg = gg + w * color[k, 1]
            b = b + w * color[k, 2]
            o = o + w * oc[k]
            s = s + w
            t = t * (1.0 - a)
            used = used + 1
        image[x, 0] = r + t * background[0]
        image[x, 1] = gg + t * background[1]
        image[x, 2] = b + t * background[2]
        oc_img[x] = o
        wsum[x] = s
        tfin[x] = t
        nused[x] = used
    return image_a, oc_a, wsum_a, tfin_a, nused_a


def splat_weights(double[::1] mean, double[::1] var, double[::1] opacity, int width):
    cdef Py_ssize_t n = mean.shape[0]
    out_a = np.zeros((width, n))
    cdef double[:, ::1] out = out_a
    cdef Py_ssize_t x, k
    cdef double t, a, dx
    for x in range(width):
        t = 1.0
        for k in range(n):
            if t < T_MIN:
                break
            dx = x - mean[k]
            a = opacity[k] * exp(-0.5 * dx * dx / var[k])
            out[x, k] = a * t
            t = t * (1.0 - a)
    return out_a


def composite_backward(double[::1] mean, double[::1] var, double[::1] opacity,
                       double[:, ::1] color, int width, double[::1] background,
                       double[:, ::1] grad_image, int threads=1):
    cdef Py_ssize_t n = mean.shape[0]
    # per-pixel scratch and partials
    a_buf_a = np.zeros((width, n))
    t_buf_a = np.zeros((width, n))
    pm_a = np.zeros((width, n))
    pv_a = np.zeros((width, n))
    po_a = np.zeros((width, n))
    pc_a = np.zeros((width, n, 3))
    cdef double[:, ::1] a_buf = a_buf_a
    cdef double[:, ::1] t_buf = t_buf_a
    cdef double[:, ::1] pm = pm_a
    cdef double[:, ::1] pv = pv_a
    cdef double[:, ::1] po = po_a
    cdef double[:, :, ::1] pc = pc_a
    cdef Py_ssize_t x, k, kk
    cdef int used
    cdef double t, a, dx, g, br, bg, bb, da, dg, gr, ggc, gb
    for x in prange(width, nogil=True, num_threads=threads, schedule="static"):
        t = 1.0
        used = 0
        for k in range(n):
            if t < T_MIN:
                break
            dx = x - mean[k]
            a = opacity[k] * exp(-0.5 * dx * dx / var[k])
            a_buf[x, k] = a
            t_buf[x, k] = t
            t = t * (1.0 - a)
            used = used + 1
        gr = grad_image[x, 0]
        ggc = grad_image[x, 1]
        gb = grad_image[x, 2]
        br = background[0]
        bg = background[1]
        bb = background[2]
        for kk in range(used):
            k = used - 1 - kk
            a = a_buf[x, k]
            t = t_buf[x, k]
            pc[x, k, 0] = a * t * gr
            pc[x, k, 1] = a * t * ggc
            pc[x, k, 2] = a * t * gb
            da = t * (gr * (color[k, 0] - br) + ggc * (color[k, 1] - bg) + gb * (color[k, 2] - bb))
            br = a * color[k, 0] + (1.0 - a) * br
            bg = a * color[k, 1] + (1.0 - a) * bg
            bb = a * color[k, 2] + (1.0 - a) * bb
            dx = x - mean[k]
            g = exp(-0.5 * dx * dx / var[k])
            po[x, k] = da * g
            dg = da * opacity[k] * g
            pm[x, k] = dg * dx / var[k]
            pv[x, k] = dg * 0.5 * dx * dx / (var[k] * var[k])

    d_mean_a = np.zeros(n)
    d_var_a = np.zeros(n)
    d_op_a = np.zeros(n)
    d_col_a = np.zeros((n, 3))
    cdef double[::1] d_mean = d_mean_a
    cdef double[::1] d_var = d_var_a
    cdef double[::1] d_op = d_op_a
    cdef double[:, ::1] d_col = d_col_a
    for x in range(width):
        for k in range(n):
            d_mean[k] += pm[x, k]
            d_var[k] += pv[x, k]
            d_op[k] += po[x, k]
            d_col[k, 0] += pc[x, k, 0]
            d_col[k, 1] += pc[x, k, 1]
            d_col[k, 2] += pc[x, k, 2]
    return d_mean_a, d_var_a, d_op_a, d_col_a
