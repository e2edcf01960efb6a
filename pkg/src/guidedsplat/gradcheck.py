"""Finite-difference checks of every analytic or autograd gradient path.

Each component builds a scalar objective, computes its gradient the way
training does (hand-written VJPs for the rasterizer and geometry, autograd
for the networks) and compares it with central differences in float64.
Per parameter group the error is ``|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)``
over a coordinate sample that mixes the largest-gradient entries with
random ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import UsageError
from .gaussians import GaussianSet
from .geometry import Camera, Pose, build_covariance, covariance_vjp, project_gaussians, \
    projection_vjp
from .losses import total_loss
from .nn_utils import seeded_init
from .rasterizer import RenderSettings, rasterize, rasterize_backward
from .tensor_io import Rng

STEP = 1e-5
TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4


@dataclass
class GroupResult:
    name: str
    error: float
    tolerance: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


@dataclass
class Report:
    component: str
    groups: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def format(self) -> str:
        lines = [f"component={self.component}"]
        for g in self.groups:
            lines.append(f"  {g.name}: max_rel_err={g.error:.3e} tol={g.tolerance:.0e} "
                         f"coords={g.coords} {'ok' if g.passed else 'FAIL'}")
        lines.append(f"  seconds={self.seconds:.2f} {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _pick(analytic: np.ndarray, rng: Rng, k: int) -> np.ndarray:
    flat = np.abs(analytic.ravel())
    if flat.size <= 2 * k:
        return np.arange(flat.size)
    top = np.argsort(-flat, kind="stable")[:k]
    rest = np.setdiff1d(np.arange(flat.size), top)
    return np.concatenate([top, rest[rng.gen.permutation(rest.size)[:k]]])


def _rel(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def check_arrays(f, arrays: dict, grads: dict, rng: Rng, tol=TOLERANCE, k=16, h=STEP):
    """Groups over numpy arrays mutated in place; ``f()`` reads them and returns a float."""
    out = []
    for name, arr in arrays.items():
        idx = _pick(grads[name], rng, k)
        flat = arr.reshape(-1)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        out.append(GroupResult(name, _rel(grads[name].reshape(-1)[idx], num), tol, idx.size))
    return out


def check_tensors(f, groups: dict, rng: Rng, tol=TOLERANCE, k=16, h=STEP):
    """Groups of torch tensors (lists per group); gradients from autograd."""
    for ts in groups.values():
        for t in ts:
            t.grad = None
    loss = f()
    loss.backward()
    out = []
    with torch.no_grad():
        for name, ts in groups.items():
            grads = np.concatenate([(t.grad if t.grad is not None else torch.zeros_like(t))
                                    .numpy().ravel() for t in ts])
            flats = [t.view(-1) for t in ts]
            offsets = np.cumsum([0] + [t.numel() for t in ts])
            idx = _pick(grads, rng, k)
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                which = int(np.searchsorted(offsets, i, side="right") - 1)
                flat, pos = flats[which], int(i - offsets[which])
                orig = flat[pos].item()
                flat[pos] = orig + h
                fp = float(f())
                flat[pos] = orig - h
                fm = float(f())
                flat[pos] = orig
                num[j] = (fp - fm) / (2 * h)
            out.append(GroupResult(name, _rel(grads[idx], num), tol, idx.size))
    return out


def _jiggle(module, rng: Rng, scale=0.05):
    """Perturb all parameters so zero-initialized heads do not hide gradient paths."""
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.as_tensor(rng.normal(0.0, scale, tuple(p.shape)), dtype=p.dtype))
    return module


def _small_camera(h=16, w=24):
    return Camera(fx=20.0, fy=21.0, cx=(w - 1) / 2 + 0.3, cy=(h - 1) / 2 - 0.2, width=w, height=h)


def _random_pose(rng: Rng, angle=0.15, shift=0.2) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    th = rng.uniform(-angle, angle)
    rot = np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * k @ k
    return Pose(rot, rng.uniform(-shift, shift, 3))


def random_gaussians(rng: Rng, n: int, cam: Camera, sh_degree=1, depth=(2.0, 5.0),
                     scale=(0.05, 0.3)) -> GaussianSet:
    z = rng.uniform(*depth, n)
    x = rng.uniform(-0.5, 0.5, n) * cam.width / cam.fx * z
    y = rng.uniform(-0.5, 0.5, n) * cam.height / cam.fy * z
    k = (sh_degree + 1) ** 2
    return GaussianSet(
        means=np.stack([x, y, z], 1),
        quats=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale, (n, 3))) + np.log(z / 3)[:, None],
        opacities=rng.uniform(0.05, 0.95, n),
        sh=rng.normal(0.0, 0.3, (n, 3, k)),
    )


def check_geometry(rng: Rng):
    cam = _small_camera()
    pose = _random_pose(rng)
    g = random_gaussians(rng, 12, cam)
    arrays = dict(means=g.means.copy(), quats=g.quats.copy(), log_scales=g.log_scales.copy())
    w_mean = rng.normal(size=(12, 2))
    w_cov = rng.normal(size=(12, 2, 2))

    def f():
        sigma = build_covariance(arrays["quats"], arrays["log_scales"])
        pr = project_gaussians(arrays["means"], sigma, pose, cam)
        return float(np.sum(w_mean * pr.mean2d) + np.sum(w_cov * pr.cov2d))

    sigma = build_covariance(arrays["quats"], arrays["log_scales"])
    pr = project_gaussians(arrays["means"], sigma, pose, cam)
    g_mu, g_sigma = projection_vjp(pr, sigma, pose, cam, w_mean, w_cov)
    g_q, g_l = covariance_vjp(arrays["quats"], arrays["log_scales"], g_sigma)
    return check_arrays(f, arrays, dict(means=g_mu, quats=g_q, log_scales=g_l), rng)


def check_rasterizer(rng: Rng):
    cam = _small_camera()
    pose = _random_pose(rng)
    settings = RenderSettings(tile=8, sh_degree=1, background=(0.1, 0.2, 0.3))
    g = random_gaussians(rng, 24, cam)
    arrays = dict(means=g.means, quats=g.quats, log_scales=g.log_scales,
                  opacities=g.opacities, sh=g.sh)
    w = rng.normal(size=(cam.height, cam.width, 3))

    def f():
        return float(np.sum(w * rasterize(GaussianSet(**arrays), pose, cam, settings).image))

    out = rasterize(GaussianSet(**arrays), pose, cam, settings, retain=True)
    gr = rasterize_backward(w, out.state)
    grads = dict(means=gr.means, quats=gr.quats, log_scales=gr.log_scales,
                 opacities=gr.opacities, sh=gr.sh)
    return check_arrays(f, arrays, grads, rng)


def check_point_encoder(rng: Rng):
    from .point_encoder import PointEncoder

    enc = _jiggle(seeded_init(PointEncoder(n_points=32, out_dim=16), rng).double(), rng)
    pts = torch.as_tensor(rng.normal(size=(32, 3)) + [0, 0, 3], dtype=torch.float64)
    pts.requires_grad_(True)
    w = torch.as_tensor(rng.normal(size=(32, 16)))
    groups = {n: list(m.parameters()) for n, m in enc.named_children()}
    groups["points"] = [pts]
    return check_tensors(lambda: (enc(pts) * w).sum(), groups, rng)


def check_transformer(rng: Rng):
    from .transformer import GuidanceTransformer

    tr = seeded_init(GuidanceTransformer((16, 32), heads=4, text_dim=12, point_dim=10,
                                         dropout=0.0), rng).double()
    pyr = [torch.as_tensor(rng.normal(size=(3, 4, 16))), torch.as_tensor(rng.normal(size=(2, 2, 32)))]
    text = torch.as_tensor(rng.normal(size=(5, 12)))
    pts = torch.as_tensor(rng.normal(size=(7, 10)))
    for t in (*pyr, text, pts):
        t.requires_grad_(True)
    ws = [torch.as_tensor(rng.normal(size=tuple(p.shape))) for p in pyr]

    def f():
        out = tr(pyr, text, pts, gamma=0.5)
        return sum((o * wi).sum() for o, wi in zip(out, ws))

    groups = {}
    for li, layer in enumerate(tr.layers):
        for n, m in layer.named_children():
            groups[f"layer_{li + 1}.{n}"] = list(m.parameters())
    groups.update(features=pyr, text_tokens=[text], point_tokens=[pts])
    return check_tensors(f, groups, rng)


def check_heads(rng: Rng):
    from .heads import GaussianDecoder, ImageEncoder

    cam = _small_camera()
    widths = (8, 16, 16)
    enc = seeded_init(ImageEncoder(widths), rng).double()
    dec = _jiggle(seeded_init(GaussianDecoder(widths, width=8), rng).double(), rng)
    image = torch.as_tensor(rng.uniform(size=(16, 24, 3)))
    depth = torch.as_tensor(rng.uniform(2.0, 4.0, (16, 24)))
    n = 16 * 24 * 2
    ws = [torch.as_tensor(rng.normal(size=s)) for s in
          ((n, 3), (n, 4), (n, 3), (n,), (n, 3, 4))]

    def f():
        gs = dec(enc(image, depth), image, depth, cam)
        parts = (gs.means, gs.quats, gs.log_scales, gs.opacities, gs.sh)
        return sum((p * wi).sum() for p, wi in zip(parts, ws))

    groups = {f"encoder.{n}": list(m.parameters()) for n, m in enc.named_children()}
    groups.update({f"decoder.{n}": list(m.parameters()) for n, m in dec.named_children()})
    return check_tensors(f, groups, rng)


def check_losses(rng: Rng):
    pred = torch.as_tensor(rng.uniform(size=(16, 24, 3)), dtype=torch.float64)
    target = torch.as_tensor(rng.uniform(size=(16, 24, 3)), dtype=torch.float64)
    pred.requires_grad_(True)
    return check_tensors(lambda: total_loss(pred, target).total, {"pred": [pred]}, rng, k=24)


def check_end_to_end(rng: Rng):
    from .pipeline import Model, prepare_inputs
    from .synthetic import SyntheticSceneSpec, make_scene
    from .tensor_io import Config

    spec = SyntheticSceneSpec(seed=int(rng.integers(0, 2 ** 31)), height=16, width=24,
                              target_offsets=(5,))
    scene, _ = make_scene(spec, 0, dtype=np.float64)
    cfg = Config(image_height=16, image_width=24, encoder_widths=(8, 16, 16), heads=4,
                 decoder_width=8, point_dim=8, n_points=16, precision="f64", tile=8,
                 dropout=0.0)
    model = _jiggle(Model(cfg, rng), rng, 0.02)
    inputs = prepare_inputs(scene, cfg)
    target = torch.as_tensor(scene.targets[0].image)

    def f():
        image, _, _ = model(inputs, scene.targets[0].pose)
        return total_loss(image, target).total

    groups = {n: list(m.parameters()) for n, m in model.named_children()}
    return check_tensors(f, groups, rng, tol=END_TO_END_TOLERANCE)


COMPONENTS = {
    "geometry": check_geometry,
    "point_encoder": check_point_encoder,
    "transformer": check_transformer,
    "heads": check_heads,
    "rasterizer": check_rasterizer,
    "losses": check_losses,
    "end_to_end": check_end_to_end,
}


def gradcheck(component: str, rng: Rng | None = None) -> Report:
    if component not in COMPONENTS:
        raise UsageError(f"unknown component {component!r}; choose from "
                         f"{', '.join(COMPONENTS)}")
    rng = rng or Rng(0)
    start = time.perf_counter()
    groups = COMPONENTS[component](rng)
    return Report(component, groups, time.perf_counter() - start)
