"""Image-quality and token-prediction metrics."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError

PSNR_CAP = 100.0  # sentinel reported for identical images

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _gaussian_window():
    half = _SSIM_WINDOW // 2
    g = np.exp(-np.arange(-half, half + 1) ** 2 / (2 * _SSIM_SIGMA**2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(np.float64)


_WINDOW = _gaussian_window()


def psnr(a, b, region=None):
    """PSNR in dB over [0, 1]-ranged images; identical inputs return the cap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if region is not None:
        sel = np.broadcast_to(np.asarray(region, dtype=bool), a.shape)
        if not sel.any():
            return PSNR_CAP
        mse = diff[sel].mean()
    else:
        mse = diff.mean()
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def l1(a, b, region=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"l1 shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    if region is not None:
        sel = np.broadcast_to(np.asarray(region, dtype=bool), a.shape)
        if not sel.any():
            return 0.0
        return float(diff[sel].mean())
    return float(diff.mean())


def _windowed(img):
    """All 11x11 windows weighted by the Gaussian kernel -> local means."""
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(img, (_SSIM_WINDOW, _SSIM_WINDOW))
    return np.tensordot(win, _WINDOW, axes=([2, 3], [0, 1]))


def ssim(a, b):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), L = 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _windowed(x), _windowed(y)
        mxx, myy, mxy = _windowed(x * x), _windowed(y * y), _windowed(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def image_metrics(a, b, region=None):
    return {"psnr": psnr(a, b, region), "ssim": ssim(a, b), "l1": l1(a, b, region)}


def token_metrics(probs, targets, masked_cells):
    """Accuracy of argmax tokens and mean probability at ground truth over masked cells.

    ``probs`` is (h, w, K); ``masked_cells`` is a boolean (h, w) selector
    or an iterable of (i, j) pairs.
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.shape[:2] != targets.shape:
        raise ShapeError(f"probs grid {probs.shape[:2]} vs targets {targets.shape}")
    if isinstance(masked_cells, np.ndarray) and masked_cells.dtype == bool:
        sel = masked_cells
    else:
        sel = np.zeros(targets.shape, dtype=bool)
        for i, j in masked_cells:
            sel[i, j] = True
    if not sel.any():
        return {"acc_at_max_prob": 0.0, "prob_at_gt": 0.0, "cells": 0}
    p = probs[sel]
    t = targets[sel]
    acc = float((p.argmax(axis=-1) == t).mean())
    gt_prob = float(np.take_along_axis(p, t[:, None], axis=-1).mean())
    return {"acc_at_max_prob": acc, "prob_at_gt": gt_prob, "cells": int(sel.sum())}
