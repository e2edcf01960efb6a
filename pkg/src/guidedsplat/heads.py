"""Depth-conditioned image encoder and the pixel-aligned Gaussian decoder."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .gaussians import GaussianSet
from .geometry import Camera, gaussian_centers
from .sh import num_coeffs

LOG_SCALE_MIN = math.log(1e-4)
LOG_SCALE_MAX = 0.0
OPACITY_LOGIT_LIMIT = 15.0  # keeps sigmoid strictly inside (0, 1) in float32


def _conv(cin, cout, stride=1, k=3):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _to_nchw(x):
    return x.permute(2, 0, 1).unsqueeze(0)


def _to_hwc(x):
    return x.squeeze(0).permute(1, 2, 0)


class ImageEncoder(nn.Module):
    """Stride-4 stem then stages of stride 1, 2, 2: features at 1/4, 1/8, 1/16."""

    def __init__(self, widths=(32, 64, 128)):
        super().__init__()
        w0 = widths[0]
        self.stem = nn.Sequential(_conv(4, w0 // 2, 2), nn.GELU(), _conv(w0 // 2, w0, 2),
                                  nn.GELU())
        stages, cin = [], w0
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(_conv(cin, w, stride), nn.GELU(), _conv(w, w), nn.GELU()))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, image, depth):
        """image (H, W, 3), depth (H, W) -> list of (Hi, Wi, Di) feature maps."""
        if image.ndim != 3 or image.shape[2] != 3 or depth.shape != image.shape[:2]:
            raise ShapeError(f"image (H, W, 3) and depth (H, W) required, got "
                             f"{tuple(image.shape)} and {tuple(depth.shape)}")
        return self.encode(torch.cat([image, depth[..., None]], dim=-1))

    def encode(self, rgbd):
        """(H, W, 4) channel-concatenated image and depth -> feature pyramid."""
        x = self.stem(_to_nchw(rgbd))
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(_to_hwc(x))
        return levels


def head_layout(g: int, sh_degree: int) -> dict:
    k = num_coeffs(sh_degree)
    sizes = dict(delta=g, offset=3 * g, opacity=g, quat=4 * g, log_scale=3 * g, sh=3 * k * g)
    out, start = {}, 0
    for name, n in sizes.items():
        out[name] = slice(start, start + n)
        start += n
    out["total"] = start
    return out


class GaussianDecoder(nn.Module):
    """Top-down fusion of the refined pyramid to full resolution, then 1x1 heads.

    The fused map is concatenated with the encoder input (RGB + depth) before
    the final convolutions, a U-Net style skip that carries full-resolution
    color to the SH head.
    """

    def __init__(self, widths=(32, 64, 128), width: int = 32, gaussians_per_pixel: int = 2,
                 sh_degree: int = 1, offset_bound: float = 0.05, init_scale: float = 0.02):
        super().__init__()
        self.g = gaussians_per_pixel
        self.sh_degree = sh_degree
        self.offset_bound = offset_bound
        self.init_scale = init_scale
        self.layout = head_layout(self.g, sh_degree)
        self.lateral = nn.ModuleList(nn.Conv2d(w, width, 1) for w in widths)
        self.refine = nn.Sequential(_conv(width + 4, width), nn.GELU(), _conv(width, width),
                                    nn.GELU())
        self.head = nn.Conv2d(width, self.layout["total"], 1)
        self.reset_special()

    def reset_special(self):
        nn.init.zeros_(self.head.weight)
        bias = torch.zeros(self.layout["total"])
        quat = bias[self.layout["quat"]].view(self.g, 4)
        quat[:, 0] = 1.0
        bias[self.layout["log_scale"]] = math.log(self.init_scale)
        with torch.no_grad():
            self.head.bias.copy_(bias)

    def raw_maps(self, refined, image, depth):
        h, w = depth.shape
        feats = [_to_nchw(f) for f in refined]
        x = self.lateral[-1](feats[-1])
        for lat, f in zip(list(self.lateral)[-2::-1], feats[-2::-1]):
            x = F.interpolate(x, size=f.shape[-2:], mode="bilinear", align_corners=False)
            x = x + lat(f)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        skip = _to_nchw(torch.cat([image, depth[..., None]], dim=-1))
        x = self.refine(torch.cat([x, skip], dim=1))
        return _to_hwc(self.head(x))

    def activate(self, raw, depth, cam: Camera, near: float = 0.01) -> GaussianSet:
        """Map raw head channels (H, W, C) to a GaussianSet with bounded parameters."""
        h, w, _ = raw.shape
        g, lay = self.g, self.layout
        k = num_coeffs(self.sh_degree)
        delta = F.softplus(raw[..., lay["delta"]]) - math.log(2.0)
        offsets = self.offset_bound * torch.tanh(raw[..., lay["offset"]]).reshape(h, w, g, 3)
        logit = raw[..., lay["opacity"]].clamp(-OPACITY_LOGIT_LIMIT, OPACITY_LOGIT_LIMIT)
        opacity = torch.sigmoid(logit)
        quat = raw[..., lay["quat"]].reshape(h, w, g, 4)
        quat = quat / quat.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        log_scale = raw[..., lay["log_scale"]].reshape(h, w, g, 3).clamp(LOG_SCALE_MIN,
                                                                         LOG_SCALE_MAX)
        sh = raw[..., lay["sh"]].reshape(h, w, g, 3, k)
        floor = near + 1e-4
        refined = depth[..., None] + delta
        clamped = int((refined < floor).sum())
        delta = refined.clamp_min(floor) - depth[..., None]
        means = gaussian_centers(depth, delta, offsets, cam)
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pixel_of = np.repeat(np.stack([rows.ravel(), cols.ravel()], -1), g, axis=0)
        return GaussianSet(means, quat.reshape(-1, 4), log_scale.reshape(-1, 3),
                           opacity.reshape(-1), sh.reshape(-1, 3, k), pixel_of, clamped)

    def forward(self, refined, image, depth, cam: Camera, near: float = 0.01) -> GaussianSet:
        return self.activate(self.raw_maps(refined, image, depth), depth, cam, near)
