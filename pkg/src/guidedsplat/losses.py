"""Photometric training loss and image-quality metrics.

All functions take (H, W, 3) images with dynamic range 1.0, either torch
tensors (differentiable) or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 1.0
    lambda_ssim: float = 0.85
    lambda_lpips: float = 0.01

    def __post_init__(self):
        if min(self.lambda_l1, self.lambda_ssim, self.lambda_lpips) < 0:
            raise ValidationError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    l1: torch.Tensor
    ssim_loss: torch.Tensor
    lpips_loss: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "ssim_loss", "lpips_loss", "total")}


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _check(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(a, b):
    a, b = _t(a, b), _t(b, a)
    _check(a, b)
    return (a - b).abs().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64):
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return (g / g.sum()).to(dtype)


def _symmetric_index(n: int, pad: int) -> torch.Tensor:
    # numpy "symmetric" padding: edge sample repeated (d c b a | a b c d | d c b a)
    idx = np.pad(np.arange(n), pad, mode="symmetric")
    return torch.as_tensor(idx, dtype=torch.long)


def _blur(x, win):
    """Separable Gaussian filter of (C, H, W) with symmetric padding, same size out."""
    c, h, w = x.shape
    pad = win.numel() // 2
    x = x.index_select(1, _symmetric_index(h, pad)).index_select(2, _symmetric_index(w, pad))
    x = x.unsqueeze(0)
    kh = win.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = win.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    x = F.conv2d(x, kh, groups=c)
    x = F.conv2d(x, kw, groups=c)
    return x.squeeze(0)


def ssim_map(a, b):
    a, b = _t(a, b), _t(b, a)
    _check(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValidationError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window(dtype=a.dtype)
    x, y = a.permute(2, 0, 1), b.permute(2, 0, 1)
    mx, my = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mx * mx
    syy = _blur(y * y, win) - my * my
    sxy = _blur(x * y, win) - mx * my
    c1, c2 = K1 ** 2, K2 ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).permute(1, 2, 0)


def ssim(a, b):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    return ssim_map(a, b).mean()


def zero_lpips(pred, target):
    return torch.zeros((), dtype=pred.dtype)


def total_loss(pred, target, weights: LossWeights = LossWeights(),
               lpips: Optional[Callable] = None) -> LossBreakdown:
    pred, target = _t(pred, target), _t(target, pred)
    l1 = l1_loss(pred, target)
    s_loss = 1 - ssim(pred, target)
    p_loss = (lpips or zero_lpips)(pred, target)
    total = weights.lambda_l1 * l1 + weights.lambda_ssim * s_loss + weights.lambda_lpips * p_loss
    return LossBreakdown(l1, s_loss, p_loss, total)


def mse(a, b) -> float:
    a = np.asarray(a.detach() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) in dB; identical images give +inf."""
    err = mse(a, b)
    return math.inf if err == 0 else 10.0 * math.log10(1.0 / err)


def ssim_value(a, b) -> float:
    with torch.no_grad():
        return float(ssim(_t(a), _t(b)))
