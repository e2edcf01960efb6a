"""torch.autograd bridge around the numpy rasterizer."""

import numpy as np
import torch

from .gaussians import GaussianSet
from .rasterizer import RenderSettings, rasterize, rasterize_backward


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, quats, log_scales, opacities, sh, pose, cam, settings, threads,
                holder):
        arrays = [t.detach().cpu().numpy() for t in (means, quats, log_scales, opacities, sh)]
        out = rasterize(GaussianSet(*arrays), pose, cam, settings, retain=True, threads=threads)
        ctx.state = out.state
        holder.append(out)
        return torch.from_numpy(np.ascontiguousarray(out.image))

    @staticmethod
    def backward(ctx, grad_image):
        g = rasterize_backward(grad_image.detach().cpu().numpy(), ctx.state)
        grads = [torch.from_numpy(np.ascontiguousarray(a))
                 for a in (g.means, g.quats, g.log_scales, g.opacities, g.sh)]
        return (*grads, None, None, None, None, None)


def render(gaussians: GaussianSet, pose, cam, settings: RenderSettings = RenderSettings(),
           threads: int = 1):
    """Differentiable render. Returns (image tensor (H, W, 3), RenderOutput)."""
    holder = []
    image = _Rasterize.apply(gaussians.means, gaussians.quats, gaussians.log_scales,
                             gaussians.opacities, gaussians.sh, pose, cam, settings, threads,
                             holder)
    return image, holder[0]
