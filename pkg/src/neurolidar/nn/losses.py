"""Mean-reduced losses. Masks are constant float arrays of the input shape."""
import numpy as np

from . import functional as F
from .tensor import Tensor, clip, log, mean, mul, total

BCE_EPS = 1e-7


def _shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def masked_mean(x, mask=None):
    if mask is None:
        return mean(x)
    mask = np.asarray(mask, dtype=x.dtype)
    n = float(mask.sum())
    if n <= 0:
        raise ValueError("mask selects no elements")
    return total(mul(x, mask)) * (1.0 / n)


def mse_loss(pred, target, mask=None):
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, pred.dtype))
    _shapes(pred, target)
    d = pred - target
    return masked_mean(d * d, mask)


def bce_loss(prob, label, weights=None):
    """Binary cross entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    label = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=prob.dtype)
    if label.shape != prob.shape:
        raise ValueError(f"shape mismatch: {prob.shape} vs {label.shape}")
    p = clip(prob, BCE_EPS, 1.0 - BCE_EPS)
    terms = mul(log(p), -label) + mul(log(1.0 - p), label - 1.0)
    if weights is None:
        return mean(terms)
    w = np.asarray(weights, dtype=prob.dtype)
    return total(mul(terms, w)) * (1.0 / float(w.sum()))


def ssim_constants(data_range):
    return (0.01 * data_range) ** 2, (0.03 * data_range) ** 2


def ssim_map(x, y, window=7, data_range=1.0):
    """Per-window SSIM over (N, C, H, W) inputs, uniform window, valid mode."""
    _shapes(x, y)
    c1, c2 = ssim_constants(data_range)
    mx = F.box_mean(x, window)
    my = F.box_mean(y, window)
    sxx = F.box_mean(x * x, window) - mx * mx
    syy = F.box_mean(y * y, window) - my * my
    sxy = F.box_mean(x * y, window) - mx * my
    num = (2.0 * (mx * my) + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def window_mask(mask, window):
    """1 where every pixel of the k x k window is valid."""
    m = np.asarray(mask, dtype=np.float64)
    s = F._box_sum(m, window)
    return (s >= window * window - 0.5).astype(np.float64)


def ssim(x, y, window=7, data_range=1.0, mask=None):
    smap = ssim_map(x, y, window, data_range)
    if mask is None:
        return mean(smap)
    return masked_mean(smap, window_mask(mask, window))
