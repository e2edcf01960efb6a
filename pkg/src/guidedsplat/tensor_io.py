"""CTST tensor container, deterministic RNG, configuration and scene ingestion.

Tensors are plain ``numpy.ndarray`` objects restricted to float32/float64.
The on-disk layout is documented in ``docs/format.md``.
"""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IoError, MissingInput, ValidationError

MAGIC = b"CTST"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def header_size(rank: int) -> int:
    return len(MAGIC) + 3 + 8 * rank


def encode_tensor(t) -> bytes:
    arr = np.asarray(t)
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; CTST stores float32 or float64")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = MAGIC + bytes([VERSION, code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes(order="C")
    return head + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < header_size(0) or buf[:4] != MAGIC:
        raise FormatError("bad magic: not a CTST file")
    version, code, rank = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise FormatError(f"unsupported CTST version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    hs = header_size(rank)
    if len(buf) < hs:
        raise FormatError("truncated header")
    dims = struct.unpack(f"<{rank}Q", buf[7:hs])
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - hs != expected:
        raise FormatError(
            f"payload is {len(buf) - hs} bytes but dims {list(dims)} need {expected}"
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=hs).reshape(dims)
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, t) -> None:
    data = encode_tensor(t)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc


def read_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError as exc:
        raise MissingInput(str(path)) from exc
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc
    return decode_tensor(buf)


class Rng:
    """Seeded Philox stream (counter-based, platform independent).

    ``split`` derives independent child streams through ``SeedSequence.spawn``
    so parallel consumers can each own a stream without coordination.
    """

    def __init__(self, seed: int = 0, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, _seq=s) for s in self._seq.spawn(n)]

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def choice(self, n: int) -> int:
        return int(self.gen.integers(0, n))


@dataclass
class Config:
    image_height: int = 64
    image_width: int = 96
    levels: int = 3
    heads: int = 8
    gamma: float = 0.5
    gaussians_per_pixel: int = 2
    sh_degree: int = 1
    lambda_l1: float = 1.0
    lambda_ssim: float = 0.85
    lambda_lpips: float = 0.01
    use_contextual: bool = True
    use_spatial: bool = True
    n_points: int = 256
    near: float = 0.01
    far: float = 100.0
    precision: str = "f32"
    encoder_widths: tuple = (32, 64, 128)
    decoder_width: int = 32
    point_dim: int = 64
    text_dim: int = 32
    dropout: float = 0.1
    attention_scale: str = "head"
    ffn_ratio: int = 4
    offset_bound: float = 0.05
    init_scale: float = 0.02
    lr: float = 3e-4
    tile: int = 8
    threads: int = 1
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.background = tuple(float(b) for b in self.background)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.near <= 0:
            raise ConfigError("near must be positive")
        if self.far <= self.near:
            raise ConfigError("far must exceed near")
        if len(self.encoder_widths) != self.levels:
            raise ConfigError(
                f"{self.levels} levels but {len(self.encoder_widths)} encoder widths"
            )
        for w in self.encoder_widths:
            if w % self.heads:
                raise ConfigError(f"heads={self.heads} does not divide feature width {w}")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in 0..3")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.attention_scale not in ("head", "full_dim"):
            raise ConfigError("attention_scale must be 'head' or 'full_dim'")
        if min(self.lambda_l1, self.lambda_ssim, self.lambda_lpips) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.gaussians_per_pixel < 1 or self.n_points < 1 or self.tile < 1:
            raise ConfigError("counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, default, raw: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def parse_overrides(pairs, base: Config | None = None) -> Config:
    """Apply ``key=value`` strings (or (key, value) tuples) to a config."""
    base = base or Config()
    defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    changes = {}
    for item in pairs:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            key, value = item.split("=", 1)
        else:
            key, value = item
        key = key.strip().replace("-", "_")
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, defaults[key], str(value))
    return dataclasses.replace(base, **changes)


def load_config(path=None, overrides=()) -> Config:
    pairs = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError as exc:
            raise MissingInput(str(path)) from exc
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                pairs.append(line)
    return parse_overrides(list(pairs) + list(overrides))


def save_config(path, config: Config) -> None:
    Path(path).write_text(config.to_text())


def check_pose(pose: np.ndarray, name: str = "pose") -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValidationError(f"{name}: expected a 4x4 matrix, got {pose.shape}")
    if not np.array_equal(pose[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValidationError(f"{name}: bottom row must be (0, 0, 0, 1)")
    if abs(np.linalg.det(pose[:3, :3]) - 1.0) > 1e-4:
        raise ValidationError(f"{name}: rotation block is not a proper rotation")
    return pose


@dataclass
class TargetView:
    name: str
    image: np.ndarray
    pose: np.ndarray  # world-from-camera


@dataclass
class Scene:
    """One source view plus optional ground-truth target views.

    ``pose`` is world-from-camera. Depth is metric z-depth, strictly positive.
    """

    image: np.ndarray
    depth: np.ndarray
    camera: "Camera"
    pose: np.ndarray
    text_tokens: np.ndarray
    point_tokens: np.ndarray | None = None
    targets: list = field(default_factory=list)
    name: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def relative_pose(self, target_pose: np.ndarray) -> np.ndarray:
        """target-camera-from-source-camera transform for a world-from-camera pose."""
        return np.linalg.inv(target_pose) @ self.pose


SCENE_FILES = ("image.ctst", "depth.ctst", "intrinsics.ctst", "pose.ctst", "text_tokens.ctst")


def _need(d: Path, name: str) -> np.ndarray:
    p = d / name
    if not p.exists():
        raise MissingInput(name)
    return read_tensor(p)


def load_scene(directory, config: Config | None = None) -> Scene:
    from .geometry import Camera

    d = Path(directory)
    image, depth, K, pose, tokens = (_need(d, n) for n in SCENE_FILES)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"image.ctst: expected (H, W, 3), got {image.shape}")
    if depth.shape != image.shape[:2]:
        raise ValidationError(f"depth.ctst: expected {image.shape[:2]}, got {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise ValidationError("depth.ctst: depth must be finite and strictly positive")
    if image.min() < 0 or image.max() > 1:
        raise ValidationError("image.ctst: values must lie in [0, 1]")
    if K.shape != (3, 3):
        raise ValidationError(f"intrinsics.ctst: expected (3, 3), got {K.shape}")
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValidationError(f"text_tokens.ctst: expected (Nc, Dc), got {tokens.shape}")
    pose = check_pose(pose, "pose.ctst")
    h, w = depth.shape
    if config is not None and (h, w) != (config.image_height, config.image_width):
        raise ValidationError(
            f"scene is {h}x{w} but config expects {config.image_height}x{config.image_width}"
        )
    cam = Camera(fx=float(K[0, 0]), fy=float(K[1, 1]), cx=float(K[0, 2]), cy=float(K[1, 2]),
                 width=w, height=h)
    point_tokens = None
    if (d / "point_tokens.ctst").exists():
        point_tokens = read_tensor(d / "point_tokens.ctst")
        if point_tokens.ndim != 2:
            raise ValidationError("point_tokens.ctst: expected (Ns, Ds)")
    targets = []
    tdir = d / "targets"
    if tdir.is_dir():
        for sub in sorted(p for p in tdir.iterdir() if p.is_dir()):
            timg = _need(sub, "image.ctst")
            tpose = check_pose(_need(sub, "pose.ctst"), f"targets/{sub.name}/pose.ctst")
            if timg.shape != image.shape:
                raise ValidationError(f"targets/{sub.name}: image shape mismatch")
            targets.append(TargetView(sub.name, timg, tpose))
    return Scene(image=image, depth=depth, camera=cam, pose=pose, text_tokens=tokens,
                 point_tokens=point_tokens, targets=targets, name=d.name)


def save_scene(directory, scene: Scene) -> None:
    d = Path(directory)
    os.makedirs(d, exist_ok=True)
    cam = scene.camera
    write_tensor(d / "image.ctst", scene.image)
    write_tensor(d / "depth.ctst", scene.depth)
    write_tensor(d / "intrinsics.ctst", cam.matrix())
    write_tensor(d / "pose.ctst", np.asarray(scene.pose, dtype=np.float64))
    write_tensor(d / "text_tokens.ctst", scene.text_tokens)
    if scene.point_tokens is not None:
        write_tensor(d / "point_tokens.ctst", scene.point_tokens)
    for tv in scene.targets:
        sub = d / "targets" / tv.name
        os.makedirs(sub, exist_ok=True)
        write_tensor(sub / "image.ctst", tv.image)
        write_tensor(sub / "pose.ctst", np.asarray(tv.pose, dtype=np.float64))
