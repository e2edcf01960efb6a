"""PointNet-style encoder turning the back-projected depth cloud into spatial tokens."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ShapeError, ValidationError


def farthest_point_sample(points, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy FPS. Ties go to the lowest index; selected points are never revisited."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"cannot sample {k} of {n} points")
    if not 0 <= seed_index < n:
        raise ValidationError("seed_index out of range")
    out = np.empty(k, dtype=np.int64)
    out[0] = seed_index
    mind = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    mind[seed_index] = -np.inf
    for i in range(1, k):
        j = int(np.argmax(mind))
        out[i] = j
        mind = np.minimum(mind, np.sum((pts - pts[j]) ** 2, axis=1))
        mind[j] = -np.inf
    return out


def _mlp(sizes, final_act=True):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if final_act or i < len(sizes) - 2:
            layers.append(nn.GELU())
    return nn.Sequential(*layers)


class TNet(nn.Module):
    """Predicts a k x k alignment matrix as identity plus a learned residual."""

    def __init__(self, k: int, widths=(64, 128), head=(64,)):
        super().__init__()
        self.k = k
        self.point_mlp = _mlp((k, *widths))
        self.head = _mlp((widths[-1], *head), final_act=True)
        self.out = nn.Linear(head[-1], k * k)
        self.reset_special()

    def reset_special(self):
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.ndim != 2 or feats.shape[1] != self.k or feats.shape[0] < 1:
            raise ShapeError(f"T-Net expects (Ns, {self.k}), got {tuple(feats.shape)}")
        pooled = self.point_mlp(feats).max(dim=0).values
        resid = self.out(self.head(pooled)).view(self.k, self.k)
        return torch.eye(self.k, dtype=feats.dtype) + resid


class PointEncoder(nn.Module):
    def __init__(self, n_points: int = 256, out_dim: int = 64, mid: int = 64):
        super().__init__()
        self.n_points = n_points
        self.out_dim = out_dim
        self.tnet1 = TNet(3)
        self.mlp1 = _mlp((3, mid))
        self.tnet2 = TNet(mid)
        self.mlp2 = _mlp((mid, 128, out_dim), final_act=False)

    def forward(self, sampled: torch.Tensor) -> torch.Tensor:
        """(Ns, 3) sampled points -> (Ns, Ds) per-point tokens."""
        x = sampled @ self.tnet1(sampled)
        x = self.mlp1(x)
        x = x @ self.tnet2(x)
        return self.mlp2(x)


def sample_points(points, n_points: int) -> np.ndarray:
    pts = np.asarray(points).reshape(-1, 3)
    if pts.shape[0] < n_points:
        raise ValidationError(f"need at least {n_points} points, got {pts.shape[0]}")
    return farthest_point_sample(pts, n_points, seed_index=0)


def encode_points(points, encoder: PointEncoder) -> torch.Tensor:
    """points (H*W, 3) -> spatial tokens (Ns, Ds): FPS from index 0, then the PointNet."""
    idx = sample_points(points, encoder.n_points)
    pts = torch.as_tensor(np.asarray(points).reshape(-1, 3)[idx],
                          dtype=next(encoder.parameters()).dtype)
    return encoder(pts)
