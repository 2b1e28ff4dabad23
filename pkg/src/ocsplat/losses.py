"""Reconstruction losses for 1D images: L1, windowed SSIM, and PSNR."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
PSNR_CAP = 99.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_WINDOW = gaussian_window()


def _filt(a):
    # zero padded 'same' filtering along pixels; the window is symmetric so
    # this is also its own adjoint
    return correlate1d(a, _WINDOW, axis=0, mode="constant", cval=0.0)


def ssim_map(x, y, with_grad: bool = False):
    """Per-pixel, per-channel SSIM of ``x`` against ``y``.

    With ``with_grad`` also returns a function mapping an upstream gradient
    on the map to a gradient on ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if len(x) < SSIM_WINDOW:
        raise ValueError(f"width {len(x)} is smaller than the SSIM window {SSIM_WINDOW}")
    mx, my = _filt(x), _filt(y)
    exx, eyy, exy = _filt(x * x), _filt(y * y), _filt(x * y)
    sxx, syy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    s = a1 * a2 / (b1 * b2)
    if not with_grad:
        return s

    def vjp(g):
        bb = b1 * b2
        d_m = (2 * my * a2 - 2 * my * a1) / bb - s * (2 * mx / b1 - 2 * mx / b2)
        d_e = -s / b2
        d_p = 2 * a1 / bb
        return _filt(g * d_m) + 2 * x * _filt(g * d_e) + y * _filt(g * d_p)

    return s, vjp


def gs_loss(rendered, reference, lambda_s: float = 0.2):
    """Mixed SSIM / L1 loss.

    Returns ``(scalar, per_pixel_loss_map, per_pixel_gradient)``; the map is
    the per-pixel mix averaged over channels and the scalar is its mean.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    w, c = rendered.shape
    diff = rendered - reference
    l1 = np.abs(diff)
    if lambda_s > 0:
        s, vjp = ssim_map(rendered, reference, with_grad=True)
        per = lambda_s * (1.0 - s) / 2.0 + (1.0 - lambda_s) * l1
        grad = vjp(np.full_like(s, -lambda_s / 2.0 / (w * c)))
    else:
        per = l1
        grad = np.zeros_like(rendered)
    grad = grad + (1.0 - lambda_s) * np.sign(diff) / (w * c)
    loss_map = per.mean(axis=1)
    return float(loss_map.mean()), loss_map, grad


def ssim(x, y) -> float:
    return float(ssim_map(x, y).mean())


def psnr(x, y) -> float:
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
