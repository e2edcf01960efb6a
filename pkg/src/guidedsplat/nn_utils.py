"""Seeded parameter initialization shared by the torch modules."""

import math

import numpy as np
import torch
from torch import nn

from .tensor_io import Rng


def seeded_init(module: nn.Module, rng: Rng) -> nn.Module:
    """Fill every Linear/Conv parameter from ``rng`` (fan-in uniform), in a fixed order.

    Weights do not depend on torch's global generator, so a seed reproduces the
    same model on any platform. Modules may define ``reset_special()`` to
    override the generic scheme afterwards (zero heads, identity T-Nets).
    """
    for name, sub in module.named_modules():
        if isinstance(sub, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            w = sub.weight
            fan_in = int(np.prod(w.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            w.data.copy_(torch.as_tensor(rng.uniform(-bound, bound, tuple(w.shape))))
            if sub.bias is not None:
                sub.bias.data.copy_(
                    torch.as_tensor(rng.uniform(-bound, bound, tuple(sub.bias.shape))))
    for sub in module.modules():
        if hasattr(sub, "reset_special"):
            sub.reset_special()
    return module
