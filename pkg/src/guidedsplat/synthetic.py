"""Ray-traced synthetic scenes with exact depth, for toy training and tests.

World frame: x right, y down, z forward (the source camera sits at the origin
looking down +z). Each scene has a textured back wall, a floor and a few
diffuse spheres/boxes; its class picks the color palette and is encoded
in the text-token file as a one-hot vector plus seeded noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera
from .tensor_io import Rng, Scene, TargetView, save_scene

PALETTES = (
    ((0.80, 0.55, 0.35), (0.45, 0.35, 0.30), (0.90, 0.30, 0.25), (0.95, 0.80, 0.40)),
    ((0.35, 0.55, 0.80), (0.30, 0.35, 0.45), (0.25, 0.80, 0.85), (0.60, 0.45, 0.90)),
    ((0.45, 0.75, 0.40), (0.35, 0.40, 0.30), (0.85, 0.85, 0.35), (0.30, 0.60, 0.35)),
    ((0.75, 0.70, 0.72), (0.40, 0.38, 0.42), (0.85, 0.40, 0.70), (0.25, 0.25, 0.30)),
)
LIGHT = np.array([-0.35, -0.8, -0.5]) / np.linalg.norm([-0.35, -0.8, -0.5])


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_scenes: int = 4
    n_objects: int = 3
    height: int = 64
    width: int = 96
    focal_ratio: float = 0.9
    look_at_depth: float = 4.0
    frame_step_deg: float = 0.5
    target_offsets: tuple = (-10, -5, 5, 10)
    n_classes: int = 4
    n_text_tokens: int = 8
    text_dim: int = 32
    token_noise: float = 0.1


@dataclass
class Layout:
    cls: int
    wall_z: float
    floor_y: float
    wall_color: np.ndarray
    floor_color: np.ndarray
    objects: list = field(default_factory=list)  # dicts: kind, center, size, color, freq


def camera_for(spec: SyntheticSceneSpec) -> Camera:
    f = spec.focal_ratio * spec.width
    return Camera(f, f, spec.width / 2, spec.height / 2, spec.width, spec.height)


def orbit_pose(spec: SyntheticSceneSpec, frame: int) -> np.ndarray:
    """World-from-camera pose ``frame`` steps along a horizontal orbit around the look-at point."""
    theta = math.radians(spec.frame_step_deg * frame)
    target = np.array([0.0, 0.0, spec.look_at_depth])
    pos = target + spec.look_at_depth * np.array([-math.sin(theta), 0.0, -math.cos(theta)])
    fwd = (target - pos) / np.linalg.norm(target - pos)
    right = np.cross([0.0, 1.0, 0.0], fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, pos
    return m


def random_layout(rng: Rng, spec: SyntheticSceneSpec) -> Layout:
    cls = int(rng.integers(0, spec.n_classes))
    pal = np.array(PALETTES[cls % len(PALETTES)])
    jitter = lambda c: np.clip(c + rng.uniform(-0.05, 0.05, 3), 0.05, 0.95)  # noqa: E731
    lay = Layout(cls, wall_z=float(rng.uniform(6.5, 8.0)), floor_y=float(rng.uniform(1.0, 1.4)),
                 wall_color=jitter(pal[0]), floor_color=jitter(pal[1]))
    for i in range(spec.n_objects):
        kind = "sphere" if rng.random() < 0.5 else "box"
        z = float(rng.uniform(3.0, 5.5))
        x = float(rng.uniform(-0.45, 0.45)) * z * spec.width / (2 * spec.focal_ratio * spec.width)
        size = float(rng.uniform(0.35, 0.7))
        y = lay.floor_y - size if rng.random() < 0.6 else float(rng.uniform(-0.6, 0.6))
        lay.objects.append(dict(kind=kind, center=np.array([x, y, z]), size=size,
                                color=jitter(pal[2 + i % 2]),
                                freq=float(rng.uniform(2.0, 4.0))))
    return lay


def _texture(p, freq):
    return 0.85 + 0.15 * np.sin(freq * p[..., 0]) * np.sin(freq * p[..., 1] + 0.7 * p[..., 2])


def trace(layout: Layout, cam: Camera, c2w: np.ndarray):
    """Render (image (H, W, 3), z-depth (H, W)) from a world-from-camera pose."""
    h, w = cam.height, cam.width
    uy, ux = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    d_cam = np.stack([(ux - cam.cx) / cam.fx, (uy - cam.cy) / cam.fy, np.ones_like(ux)], -1)
    rot, origin = c2w[:3, :3], c2w[:3, 3]
    d = d_cam @ rot.T  # parameter t along d equals camera z-depth
    t_best = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    albedo = np.zeros((h, w, 3))

    def offer(t, n, color):
        nonlocal t_best
        better = np.isfinite(t) & (t > 1e-6) & (t < t_best)
        t_best = np.where(better, t, t_best)
        normal[better] = n[better] if n.ndim == 3 else n
        albedo[better] = color[better] if color.ndim == 3 else color

    def plane(axis, value, n):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (value - origin[axis]) / d[..., axis]
        return np.where(t > 0, t, np.inf), np.broadcast_to(np.asarray(n, float), (h, w, 3))

    def point(t):
        return origin + np.where(np.isfinite(t), t, 0.0)[..., None] * d

    t, n = plane(2, layout.wall_z, (0.0, 0.0, -1.0))
    offer(t, n, layout.wall_color * _texture(point(t), 2.2)[..., None])
    t, n = plane(1, layout.floor_y, (0.0, -1.0, 0.0))
    p = point(t)
    offer(t, n, layout.floor_color * _texture(p[..., [0, 2, 1]], 3.0)[..., None])

    for obj in layout.objects:
        c, s = obj["center"], obj["size"]
        if obj["kind"] == "sphere":
            oc = origin - c
            a = np.sum(d * d, -1)
            b = 2 * np.sum(d * oc, -1)
            disc = b * b - 4 * a * (oc @ oc - s * s)
            with np.errstate(invalid="ignore"):
                t = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), np.inf)
            p = point(t)
            n = (p - c) / s
        else:
            lo, hi = c - s, c + s
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (lo - origin) / d
                t1 = (hi - origin) / d
            tmin = np.nanmax(np.minimum(t0, t1), -1)
            tmax = np.nanmin(np.maximum(t0, t1), -1)
            t = np.where((tmax >= tmin) & (tmax > 0), tmin, np.inf)
            p = point(t)
            face = np.argmax(np.abs((p - c) / s), -1)
            n = np.zeros((h, w, 3))
            np.put_along_axis(n, face[..., None], np.sign(np.take_along_axis(
                p - c, face[..., None], -1)), -1)
        tex = _texture(p, obj["freq"])[..., None]
        offer(t, n, obj["color"] * tex)

    shade = 0.4 + 0.6 * np.maximum(0.0, normal @ LIGHT)
    image = np.clip(albedo * shade[..., None], 0.0, 1.0)
    return image, t_best


def text_tokens(rng: Rng, cls: int, spec: SyntheticSceneSpec) -> np.ndarray:
    tok = np.zeros((spec.n_text_tokens, spec.text_dim))
    tok[:, cls] = 1.0
    return tok + rng.normal(0.0, spec.token_noise, tok.shape)


def make_scene(spec: SyntheticSceneSpec, index: int, dtype=np.float32) -> tuple[Scene, Layout]:
    rng = Rng(spec.seed).split(index + 1)[index]
    layout = random_layout(rng, spec)
    cam = camera_for(spec)
    src = orbit_pose(spec, 0)
    image, depth = trace(layout, cam, src)
    targets = []
    for off in spec.target_offsets:
        pose = orbit_pose(spec, off)
        timg, _ = trace(layout, cam, pose)
        name = f"{'p' if off >= 0 else 'm'}{abs(off):02d}"
        targets.append(TargetView(name, timg.astype(dtype), pose))
    scene = Scene(image=image.astype(dtype), depth=depth.astype(dtype), camera=cam, pose=src,
                  text_tokens=text_tokens(rng, layout.cls, spec).astype(dtype),
                  targets=targets, name=f"scene_{index:03d}")
    return scene, layout


def gen_scenes(spec: SyntheticSceneSpec, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = []
    for i in range(spec.n_scenes):
        scene, _ = make_scene(spec, i)
        p = out / scene.name
        save_scene(p, scene)
        paths.append(p)
    return paths
