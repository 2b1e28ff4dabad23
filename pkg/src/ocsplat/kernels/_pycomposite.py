"""Numpy reference implementation of the compositing kernels.

Inputs are splat arrays already sorted front to back.  Both functions share
the signature of the compiled versions in ``_ccomposite.pyx``; ``threads`` is
accepted and ignored.
"""

import numpy as np

T_MIN = 1e-4


def _alphas(mean, var, opacity, width):
    x = np.arange(width, dtype=np.float64)[:, None]
    d = x - mean[None, :]
    g = np.exp(-0.5 * d * d / var[None, :])
    return d, g, opacity[None, :] * g


def _transmittance(a):
    """Exclusive front-to-back transmittance and the prefix of used splats."""
    w, n = a.shape
    t = np.ones((w, n + 1))
    if n:
        np.cumprod(1.0 - a, axis=1, out=t[:, 1:])
    # splat k is blended iff the transmittance in front of it is >= T_MIN
    n_used = np.sum(t[:, :n] >= T_MIN, axis=1).astype(np.int32)
    t_final = t[np.arange(w), n_used]
    return t, n_used, t_final


def composite_forward(mean, var, opacity, color, oc, width, background, threads=1):
    """Blend splats into a color image, an OC image and weight sums.

    Returns ``(image, oc_image, weight_sum, t_final, n_used)``.
    """
    mean = np.ascontiguousarray(mean, dtype=np.float64)
    n = len(mean)
    _, _, a = _alphas(mean, np.asarray(var, dtype=np.float64), np.asarray(opacity, dtype=np.float64), width)
    t, n_used, t_final = _transmittance(a)
    used = np.arange(n)[None, :] < n_used[:, None]
    wts = np.where(used, a * t[:, :n], 0.0)
    image = wts @ np.asarray(color, dtype=np.float64).reshape(n, 3) + t_final[:, None] * np.asarray(background)[None, :]
    oc_image = wts @ np.asarray(oc, dtype=np.float64)
    return image, oc_image, wts.sum(axis=1), t_final, n_used


def splat_weights(mean, var, opacity, width):
    """(width, N) matrix of blending weights w_k(x)."""
    n = len(mean)
    _, _, a = _alphas(np.asarray(mean, dtype=np.float64), np.asarray(var, dtype=np.float64),
                      np.asarray(opacity, dtype=np.float64), width)
    t, n_used, _ = _transmittance(a)
    used = np.arange(n)[None, :] < n_used[:, None]
    return np.where(used, a * t[:, :n], 0.0)


def composite_backward(mean, var, opacity, color, width, background, grad_image, threads=1):
    """Gradients of sum(grad_image * image) w.r.t. the splat inputs.

    Returns ``(d_mean, d_var, d_opacity, d_color)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    opacity = np.asarray(opacity, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
    g_img = np.asarray(grad_image, dtype=np.float64)
    n = len(mean)
    d, g, a = _alphas(mean, var, opacity, width)
    t, n_used, t_final = _transmittance(a)
    used = np.arange(n)[None, :] < n_used[:, None]
    wts = np.where(used, a * t[:, :n], 0.0)

    # color behind splat k, blended back to front; division free
    behind = np.empty((width, n, 3))
    acc = np.broadcast_to(np.asarray(background, dtype=np.float64), (width, 3)).copy()
    for k in range(n - 1, -1, -1):
        behind[:, k] = acc
        ak = np.where(used[:, k], a[:, k], 0.0)[:, None]
        acc = np.where(used[:, k, None], ak * color[k][None, :] + (1.0 - ak) * acc, acc)

    d_a = np.einsum("wc,wkc->wk", g_img, color[None, :, :] - behind) * t[:, :n]
    d_a = np.where(used, d_a, 0.0)
    d_color = wts.T @ g_img
    d_opacity = np.sum(d_a * g, axis=0)
    d_g = d_a * opacity[None, :]
    d_mean = np.sum(d_g * g * d / var[None, :], axis=0)
    d_var = np.sum(d_g * g * 0.5 * d * d / (var * var)[None, :], axis=0)
    return d_mean, d_var, d_opacity, d_color
