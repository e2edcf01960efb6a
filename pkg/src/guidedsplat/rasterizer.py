"""Differentiable Gaussian rasterization on the CPU.

Two forward paths share one preparation stage (covariance, EWA projection,
SH color, global depth sort):

* ``rasterize`` bins splats into screen tiles and composites each tile with
  a compiled per-pixel loop over the tile's splat list;
* ``rasterize_oracle`` walks every depth-sorted splat in turn for all pixels,
  with no tiling and no radius culling.

``rasterize_backward`` is the exact vector-Jacobian product of the tiled
forward. It recomputes per-pixel weights from the saved projected state and
walks each pixel's contributors back to front.

Culling radius: a splat contributes at a pixel only if
``alpha * exp(-m^2 / 2) >= alpha_cutoff`` with ``m`` the Mahalanobis distance,
i.e. ``m^2 <= 2 ln(alpha / alpha_cutoff)``. Since ``m^2 >= |d|^2 / lambda_max``
the disc of radius ``sqrt(2 ln(alpha / alpha_cutoff) * lambda_max)`` contains
every contributing pixel. See docs/rasterizer.md.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import backward_tile, forward_tile
from .errors import StateError
from .geometry import (EPS_2D, Camera, Pose, build_covariance, covariance_vjp,
                       project_gaussians, projection_vjp)
from .sh import evaluate_sh, sh_colors, sh_colors_vjp  # noqa: F401  (re-export)

__all__ = ["RenderSettings", "RenderOutput", "rasterize", "rasterize_oracle",
           "rasterize_backward", "evaluate_sh"]


@dataclass(frozen=True)
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    tile: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    alpha_max: float = 0.99
    sh_degree: int = 1
    near: float = 0.01
    far: float = 100.0
    eps2d: float = EPS_2D

    def __post_init__(self):
        if self.tile < 1:
            raise ValueError("tile must be >= 1")
        if not (0 < self.alpha_cutoff < 1 and 0 < self.transmittance_floor < 1):
            raise ValueError("cutoffs must lie in (0, 1)")


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W)
    counts: np.ndarray  # (H, W) contributing splats
    depth: np.ndarray  # (H, W) alpha-weighted mean splat depth, diagnostic only
    n_culled: int = 0
    n_singular: int = 0
    state: "RenderState | None" = field(default=None, repr=False)


@dataclass
class _Prepared:
    n: int
    dtype: np.dtype
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sigma: np.ndarray
    proj: object
    conic: np.ndarray  # (N, 3) = (A, B, C) of the inverse 2D covariance
    colors: np.ndarray
    color_raw: np.ndarray
    dirs: np.ndarray
    view_norm: np.ndarray
    order: np.ndarray  # indices of renderable splats, front to back
    n_culled: int
    n_singular: int


@dataclass
class RenderState:
    prep: _Prepared
    pose: Pose
    cam: Camera
    settings: RenderSettings
    tiles: list  # (y0, y1, x0, x1, splat ids in depth order)
    threads: int


def _as_arrays(gaussians, dtype=None):
    def arr(a):
        if hasattr(a, "detach"):
            a = a.detach().cpu().numpy()
        return np.asarray(a)

    means = arr(gaussians.means)
    dtype = np.dtype(dtype or (means.dtype if means.dtype in (np.float32, np.float64)
                               else np.float64))
    return [arr(getattr(gaussians, k)).astype(dtype, copy=False)
            for k in ("means", "quats", "log_scales", "opacities", "sh")], dtype


def _prepare(gaussians, pose: Pose, cam: Camera, s: RenderSettings) -> _Prepared:
    (means, quats, log_scales, opac, sh), dtype = _as_arrays(gaussians)
    n = means.shape[0]
    sigma = build_covariance(quats, log_scales) if n else np.zeros((0, 3, 3), dtype)
    proj = project_gaussians(means, sigma, pose, cam, s.near, s.far, s.eps2d)
    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    det = a * c - b * b
    ok = proj.valid & np.isfinite(det) & (det > 0)
    n_singular = int(np.sum(proj.valid & ~ok))
    safe_det = np.where(ok, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=-1)
    center = pose.camera_center().astype(dtype)
    v = means - center
    view_norm = np.linalg.norm(v, axis=-1)
    dirs = v / np.where(view_norm > 0, view_norm, 1.0)[:, None]
    colors, raw = sh_colors(sh, dirs, s.sh_degree) if n else (np.zeros((0, 3), dtype),) * 2
    live = np.flatnonzero(ok)
    order = live[np.argsort(proj.depth[live], kind="stable")]
    return _Prepared(n, dtype, means, quats, log_scales, opac, sh, sigma, proj, conic,
                     colors.astype(dtype), raw, dirs, view_norm, order,
                     int(np.sum(~proj.valid)), n_singular)


def culling_radius(prep: _Prepared, s: RenderSettings) -> np.ndarray:
    """Per-splat screen radius outside of which alpha falls below the cutoff."""
    cov = prep.proj.cov2d
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    ratio = prep.opacities.astype(np.float64) / s.alpha_cutoff
    with np.errstate(divide="ignore", invalid="ignore"):
        m2 = 2.0 * np.log(np.maximum(ratio, 1e-300))
    r = np.sqrt(np.maximum(m2, 0.0) * lam)
    r = np.where(ratio >= 1.0, r * (1 + 1e-6) + 1e-3, -1.0)  # -1 marks "never contributes"
    return r


def _bin_tiles(prep: _Prepared, cam: Camera, s: RenderSettings):
    t = s.tile
    ntx, nty = -(-cam.width // t), -(-cam.height // t)
    ids = prep.order
    r = culling_radius(prep, s)[ids]
    mx = prep.proj.mean2d[ids, 0].astype(np.float64)
    my = prep.proj.mean2d[ids, 1].astype(np.float64)
    keep = r >= 0
    x0 = np.clip(np.ceil(mx - r), 0, cam.width - 1)
    x1 = np.clip(np.floor(mx + r), 0, cam.width - 1)
    y0 = np.clip(np.ceil(my - r), 0, cam.height - 1)
    y1 = np.clip(np.floor(my + r), 0, cam.height - 1)
    keep &= (mx + r >= 0) & (mx - r <= cam.width - 1) & (my + r >= 0) & (my - r <= cam.height - 1)
    keep &= (x0 <= x1) & (y0 <= y1)
    ids, x0, x1, y0, y1 = (v[keep] for v in (ids, x0, x1, y0, y1))
    rank = np.flatnonzero(keep)
    tx0, tx1 = (x0 // t).astype(np.int64), (x1 // t).astype(np.int64)
    ty0, ty1 = (y0 // t).astype(np.int64), (y1 // t).astype(np.int64)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(ids)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[owner] + local % nx[owner]
    ty = ty0[owner] + local // nx[owner]
    tile_id = ty * ntx + tx
    srt = np.lexsort((rank[owner], tile_id))
    tile_id, splat = tile_id[srt], ids[owner[srt]]
    bounds = np.searchsorted(tile_id, np.arange(ntx * nty + 1))
    tiles = []
    for k in range(ntx * nty):
        ty_, tx_ = divmod(k, ntx)
        tiles.append((ty_ * t, min((ty_ + 1) * t, cam.height),
                      tx_ * t, min((tx_ + 1) * t, cam.width),
                      splat[bounds[k]:bounds[k + 1]]))
    return tiles


def _forward_tile(prep, s, bg, tile):
    y0, y1, x0, x1, ids = tile
    return forward_tile(y0, y1, x0, x1, ids, prep.proj.mean2d, prep.conic, prep.opacities,
                        prep.colors, prep.proj.depth, bg, s.alpha_cutoff,
                        s.transmittance_floor, s.alpha_max)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def rasterize(gaussians, pose: Pose, cam: Camera, settings: RenderSettings = RenderSettings(),
              retain: bool = False, threads: int = 1) -> RenderOutput:
    """Tiled front-to-back compositing; ``retain`` keeps state for the backward."""
    prep = _prepare(gaussians, pose, cam, settings)
    bg = np.asarray(settings.background, dtype=prep.dtype)
    tiles = _bin_tiles(prep, cam, settings)
    parts = _map(lambda tl: _forward_tile(prep, settings, bg, tl), tiles, threads)
    h, w = cam.height, cam.width
    image = np.empty((h, w, 3), prep.dtype)
    trans = np.empty((h, w), prep.dtype)
    counts = np.empty((h, w), np.int32)
    depth = np.empty((h, w), prep.dtype)
    for (y0, y1, x0, x1, _), (c, t, n, d) in zip(tiles, parts):
        image[y0:y1, x0:x1], trans[y0:y1, x0:x1] = c, t
        counts[y0:y1, x0:x1], depth[y0:y1, x0:x1] = n, d
    state = RenderState(prep, pose, cam, settings, tiles, threads) if retain else None
    return RenderOutput(image, trans, counts, depth, prep.n_culled, prep.n_singular, state)


def rasterize_oracle(gaussians, pose: Pose, cam: Camera,
                     settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Reference renderer: every pixel visits every depth-sorted splat in order."""
    s = settings
    prep = _prepare(gaussians, pose, cam, s)
    dtype = prep.dtype
    h, w = cam.height, cam.width
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    px, py = xs.ravel(), ys.ravel()
    npx = px.size
    trans = np.ones(npx, dtype)
    color = np.zeros((npx, 3), dtype)
    wdepth = np.zeros(npx, dtype)
    wsum = np.zeros(npx, dtype)
    counts = np.zeros(npx, np.int32)
    done = np.zeros(npx, bool)
    amax = dtype.type(s.alpha_max)
    for j in prep.order:
        ca, cb, cc = prep.conic[j]
        dx = px - prep.proj.mean2d[j, 0]
        dy = py - prep.proj.mean2d[j, 1]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        alpha = np.minimum(amax, prep.opacities[j] * np.exp(power))
        live = (alpha >= s.alpha_cutoff) & ~done
        test_t = trans * (1 - alpha)
        stop = live & (test_t < s.transmittance_floor)
        done |= stop
        upd = live & ~stop
        wgt = np.where(upd, alpha * trans, dtype.type(0))
        color += wgt[:, None] * prep.colors[j]
        wdepth += wgt * prep.proj.depth[j]
        wsum += wgt
        counts += upd
        trans = np.where(upd, test_t, trans)
    bg = np.asarray(s.background, dtype=dtype)
    color += trans[:, None] * bg
    depth = np.where(wsum > 0, wdepth / np.where(wsum > 0, wsum, 1), 0)
    return RenderOutput(color.reshape(h, w, 3), trans.reshape(h, w), counts.reshape(h, w),
                        depth.reshape(h, w), prep.n_culled, prep.n_singular)


@dataclass
class Gradients:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray


def _backward_tile(prep, s, bg, tile, grad_image):
    y0, y1, x0, x1, ids = tile
    if len(ids) == 0:
        return None
    parts = backward_tile(y0, y1, x0, x1, ids, prep.proj.mean2d, prep.conic, prep.opacities,
                          prep.colors, bg, grad_image, s.alpha_cutoff, s.transmittance_floor,
                          s.alpha_max)
    return (ids, *parts)


def rasterize_backward(grad_image, state: RenderState | None) -> Gradients:
    """Vector-Jacobian product of ``rasterize`` w.r.t. every primitive parameter."""
    if state is None:
        raise StateError("forward pass ran without retain=True; no saved state")
    prep, s, pose, cam = state.prep, state.settings, state.pose, state.cam
    dtype = prep.dtype
    grad_image = np.asarray(grad_image, dtype=dtype)
    bg = np.asarray(s.background, dtype=dtype)
    n = prep.n
    g_mean2d = np.zeros((n, 2), dtype)
    g_conic = np.zeros((n, 3), dtype)
    g_opac = np.zeros(n, dtype)
    g_color = np.zeros((n, 3), dtype)
    parts = _map(lambda tl: _backward_tile(prep, s, bg, tl, grad_image), state.tiles,
                 state.threads)
    for part in parts:  # fixed tile-major reduction order
        if part is None:
            continue
        ids, gm, gq, go, gcol = part  # ids are unique within a tile
        g_mean2d[ids] += gm
        g_conic[ids] += gq
        g_opac[ids] += go
        g_color[ids] += gcol

    # conic = inverse(cov2d); gradient w.r.t. the full symmetric conic matrix
    ca, cb, cc = prep.conic[:, 0], prep.conic[:, 1], prep.conic[:, 2]
    conic_m = np.stack([np.stack([ca, cb], -1), np.stack([cb, cc], -1)], -2)
    gq_m = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                     np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    g_cov2d = -conic_m @ gq_m @ conic_m
    valid = np.zeros(n, bool)
    valid[prep.order] = True
    g_cov2d[~valid] = 0
    g_mean2d[~valid] = 0
    g_means, g_sigma = projection_vjp(prep.proj, prep.sigma, pose, cam, g_mean2d, g_cov2d)
    g_means[~valid] = 0
    g_sigma[~valid] = 0
    g_quats, g_logs = covariance_vjp(prep.quats, prep.log_scales, g_sigma)
    g_sh, g_dirs = sh_colors_vjp(prep.sh, prep.dirs, s.sh_degree, prep.color_raw, g_color)
    d = prep.dirs
    g_v = (g_dirs - d * np.sum(d * g_dirs, axis=-1, keepdims=True)) / \
        np.where(prep.view_norm > 0, prep.view_norm, 1.0)[:, None]
    g_means = g_means + g_v
    return Gradients(g_means, g_quats, g_logs, g_opac, g_sh)
