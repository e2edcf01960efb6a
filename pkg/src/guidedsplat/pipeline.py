"""End-to-end model: single view + depth + guidance tokens -> Gaussians -> image.

Also holds the checkpoint format, the toy training loop and the metrics
report used by the command line tool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, IoError, MissingInput, TrainingError, ValidationError
from .geometry import Pose, unproject_depth
from .heads import GaussianDecoder, ImageEncoder
from .losses import LossWeights, psnr, ssim_value, total_loss
from .nn_utils import seeded_init
from .point_encoder import PointEncoder, sample_points
from .rasterizer import RenderSettings
from .splat_autograd import render
from .transformer import GuidanceTransformer
from .tensor_io import Config, Rng, Scene, load_config, read_tensor, save_config, write_tensor

TORCH_DTYPES = {"f32": torch.float32, "f64": torch.float64}

# Stage names written to the forward trace, in execution order.
STAGES = ("concat_image_depth", "encode_image", "load_text_tokens", "unproject_depth",
          "encode_points", "transformer", "decode_gaussians", "rasterize")

ABLATIONS = {
    "baseline": dict(use_contextual=False, use_spatial=False),
    "contextual": dict(use_contextual=True, use_spatial=False),
    "spatial": dict(use_contextual=False, use_spatial=True),
    "both": dict(use_contextual=True, use_spatial=True),
}


def render_settings(config: Config) -> RenderSettings:
    return RenderSettings(background=config.background, tile=config.tile,
                          sh_degree=config.sh_degree, near=config.near, far=config.far)


@dataclass
class Inputs:
    """Per-scene tensors with the farthest-point sample precomputed (it is parameter free)."""

    scene: Scene
    image: torch.Tensor
    depth: torch.Tensor
    text_tokens: torch.Tensor
    point_tokens: torch.Tensor | None
    fps_index: np.ndarray


def prepare_inputs(scene: Scene, config: Config) -> Inputs:
    if (scene.height, scene.width) != (config.image_height, config.image_width):
        raise ConfigError(f"scene {scene.name!r} is {scene.height}x{scene.width}, config "
                          f"expects {config.image_height}x{config.image_width}")
    if scene.text_tokens.shape[1] != config.text_dim:
        raise ConfigError(f"text tokens have width {scene.text_tokens.shape[1]}, config "
                          f"expects text_dim={config.text_dim}")
    if scene.point_tokens is not None and scene.point_tokens.shape[1] != config.point_dim:
        raise ConfigError(f"point tokens have width {scene.point_tokens.shape[1]}, config "
                          f"expects point_dim={config.point_dim}")
    dt = TORCH_DTYPES[config.precision]

    def t(a):
        return torch.as_tensor(np.asarray(a, dtype=config.dtype), dtype=dt)

    points = unproject_depth(np.asarray(scene.depth, np.float64), scene.camera)
    return Inputs(scene, t(scene.image), t(scene.depth), t(scene.text_tokens),
                  None if scene.point_tokens is None else t(scene.point_tokens),
                  sample_points(points, config.n_points))


class Model(nn.Module):
    def __init__(self, config: Config, rng: Rng | None = None):
        super().__init__()
        self.config = config
        widths = config.encoder_widths
        self.encoder = ImageEncoder(widths)
        self.point_encoder = PointEncoder(config.n_points, config.point_dim)
        self.transformer = GuidanceTransformer(widths, config.heads, config.text_dim,
                                               config.point_dim, config.ffn_ratio,
                                               config.attention_scale, config.dropout)
        self.decoder = GaussianDecoder(widths, config.decoder_width, config.gaussians_per_pixel,
                                       config.sh_degree, config.offset_bound, config.init_scale)
        seeded_init(self, rng or Rng(0))
        self.to(TORCH_DTYPES[config.precision])

    def gaussians(self, inputs: Inputs, training: bool = False, rng: Rng | None = None,
                  trace: list | None = None):
        cfg = self.config
        cam = inputs.scene.camera
        rgbd = torch.cat([inputs.image, inputs.depth[..., None]], dim=-1)
        _log(trace, "concat_image_depth")
        pyramid = self.encoder.encode(rgbd)
        _log(trace, "encode_image")
        text = inputs.text_tokens
        _log(trace, "load_text_tokens")
        points = unproject_depth(inputs.depth, cam).reshape(-1, 3)
        _log(trace, "unproject_depth")
        if inputs.point_tokens is not None:
            spatial = inputs.point_tokens
        else:
            spatial = self.point_encoder(points[torch.as_tensor(inputs.fps_index)])
        _log(trace, "encode_points")
        refined = self.transformer(pyramid, text, spatial, cfg.gamma, cfg.use_contextual,
                                   cfg.use_spatial, training, rng, trace)
        _log(trace, "transformer")
        gs = self.decoder(refined, inputs.image, inputs.depth, cam, cfg.near)
        _log(trace, "decode_gaussians")
        return gs

    def forward(self, inputs: Inputs, target_pose, training: bool = False,
                rng: Rng | None = None, trace: list | None = None):
        """Render at a world-from-camera ``target_pose``. Returns (image, GaussianSet, RenderOutput)."""
        gs = self.gaussians(inputs, training, rng, trace)
        rel = Pose.from_matrix(inputs.scene.relative_pose(np.asarray(target_pose, np.float64)))
        image, out = render(gs, rel, inputs.scene.camera, render_settings(self.config),
                            self.config.threads)
        _log(trace, "rasterize")
        return image, gs, out


def _log(trace, event):
    if trace is not None:
        trace.append(event)


@dataclass
class Checkpoint:
    """Named parameter tensors, a config snapshot and the optimizer step count.

    On disk: ``manifest.txt`` (step and one line per tensor), ``config.txt``
    and ``tensors/<name>.ctst``. Writing is deterministic, so load + save
    reproduces the same bytes.
    """

    config: Config
    tensors: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def from_model(cls, model: Model, step: int = 0) -> "Checkpoint":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.config, tensors, step)

    def to_model(self) -> Model:
        model = Model(self.config)
        state = model.state_dict()
        if set(state) != set(self.tensors):
            missing = sorted(set(state) ^ set(self.tensors))
            raise ConfigError(f"checkpoint does not match the model: {missing[:5]}")
        for k, v in self.tensors.items():
            if tuple(state[k].shape) != v.shape:
                raise ConfigError(f"{k}: checkpoint shape {v.shape} vs model "
                                  f"{tuple(state[k].shape)}")
        model.load_state_dict({k: torch.as_tensor(v) for k, v in self.tensors.items()})
        return model

    def save(self, directory) -> None:
        d = Path(directory)
        (d / "tensors").mkdir(parents=True, exist_ok=True)
        lines = [f"step={self.step}"]
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            write_tensor(d / "tensors" / f"{name}.ctst", arr)
            lines.append(f"tensor={name} shape={'x'.join(map(str, arr.shape)) or 'scalar'}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")
        save_config(d / "config.txt", self.config)

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        if not (d / "manifest.txt").exists():
            raise MissingInput(str(d / "manifest.txt"))
        config = load_config(d / "config.txt")
        step, tensors = 0, {}
        for line in (d / "manifest.txt").read_text().splitlines():
            if line.startswith("step="):
                step = int(line[5:])
            elif line.startswith("tensor="):
                name = line.split()[0][7:]
                tensors[name] = read_tensor(d / "tensors" / f"{name}.ctst")
        return cls(config, tensors, step)

    def equals(self, other: "Checkpoint") -> bool:
        return (self.step == other.step and self.config == other.config
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k])
                        for k in self.tensors))


def _streams(rng: Rng):
    init, data, dropout = rng.split(3)
    return init, data, dropout


def initial_model(config: Config, rng: Rng) -> Model:
    """The model ``train_toy`` starts from for this rng."""
    return Model(config, _streams(rng)[0])


def forward(scene: Scene, checkpoint: Checkpoint, target_pose, trace: list | None = None):
    """Eval-mode forward of a checkpoint. Returns (image (H, W, 3) numpy, GaussianSet, RenderOutput)."""
    model = checkpoint.to_model()
    inputs = prepare_inputs(scene, checkpoint.config)
    with torch.no_grad():
        image, gs, out = model(inputs, target_pose, trace=trace)
    return image.numpy(), gs.numpy(), out


def _loss_weights(config: Config) -> LossWeights:
    return LossWeights(config.lambda_l1, config.lambda_ssim, config.lambda_lpips)


def train_toy(config: Config, scenes, steps: int, rng: Rng, lpips=None, log=None,
              dump_dir=None):
    """Adam on the rendered-target loss, cycling through scenes in order.

    Each step renders one target view of one scene (picked by ``rng``).
    Returns (Checkpoint, list of per-step loss dicts). ``log`` is called with
    (step, loss dict) after every step. A non-finite loss raises
    TrainingError after writing the offending step's inputs and parameters to
    ``dump_dir`` when given.
    """
    if not scenes or any(not s.targets for s in scenes):
        raise ValidationError("training needs at least one scene, each with a target view")
    if steps < 0:
        raise ValidationError("steps must be nonnegative")
    init_rng, data_rng, drop_rng = _streams(rng)
    model = Model(config, init_rng)
    inputs = [prepare_inputs(s, config) for s in scenes]
    dt = TORCH_DTYPES[config.precision]
    weights = _loss_weights(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    history = []
    model.train()
    for step in range(steps):
        inp = inputs[step % len(inputs)]
        target = inp.scene.targets[data_rng.choice(len(inp.scene.targets))]
        step_rng = drop_rng.split(1)[0]
        opt.zero_grad()
        image, _, _ = model(inp, target.pose, training=True, rng=step_rng)
        gt = torch.as_tensor(np.asarray(target.image, config.dtype), dtype=dt)
        loss = total_loss(image, gt, weights, lpips)
        record = loss.as_floats()
        if not all(math.isfinite(v) for v in record.values()):
            _dump(dump_dir, step, inp, target, model, record)
            raise TrainingError(f"non-finite loss at step {step} (scene {inp.scene.name!r}, "
                                f"target {target.name!r}): {record}")
        loss.total.backward()
        opt.step()
        history.append(record)
        if log is not None:
            log(step, record)
    model.eval()
    return Checkpoint.from_model(model, steps), history


def _dump(dump_dir, step, inp, target, model, record):
    if dump_dir is None:
        return
    d = Path(dump_dir) / f"nan_step_{step:06d}"
    Checkpoint.from_model(model, step).save(d / "checkpoint")
    lines = [f"step={step}", f"scene={inp.scene.name}", f"target={target.name}"]
    lines += [f"{k}={v}" for k, v in record.items()]
    (d / "report.txt").write_text("\n".join(lines) + "\n")


def format_losses(history) -> str:
    return "".join(f"step={i} " + " ".join(f"{k}={v!r}" for k, v in rec.items()) + "\n"
                   for i, rec in enumerate(history))


def evaluate_pairs(preds: dict, gts: dict) -> list[tuple[str, float]]:
    """Per-image PSNR/SSIM and their means, as (metric, value) sorted by image name."""
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} predictions but {len(gts)} ground-truth images")
    if set(preds) != set(gts):
        raise ValidationError(f"file sets differ: {sorted(set(preds) ^ set(gts))}")
    rows, ps, ss = [], [], []
    for name in sorted(preds):
        p, s = psnr(preds[name], gts[name]), ssim_value(preds[name], gts[name])
        rows += [(f"psnr[{name}]", p), (f"ssim[{name}]", s)]
        ps.append(p)
        ss.append(s)
    rows += [("mean_psnr", float(np.mean(ps))), ("mean_ssim", float(np.mean(ss)))]
    return rows


def _collect(directory) -> dict:
    d = Path(directory)
    if not d.is_dir():
        raise IoError(str(d), "not a directory")
    return {str(p.relative_to(d)): read_tensor(p) for p in sorted(d.rglob("*.ctst"))}


def evaluate(pred_dir, gt_dir) -> list[tuple[str, float]]:
    return evaluate_pairs(_collect(pred_dir), _collect(gt_dir))


def format_report(rows) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in rows)


def render_targets(checkpoint: Checkpoint, scenes, out_dir) -> None:
    """Write ``<scene>/<target>.ctst`` renders and matching ground truth under out_dir/{pred,gt}."""
    model = checkpoint.to_model()
    out = Path(out_dir)
    with torch.no_grad():
        for scene in scenes:
            inp = prepare_inputs(scene, checkpoint.config)
            for sub in ("pred", "gt"):
                (out / sub / scene.name).mkdir(parents=True, exist_ok=True)
            for tv in scene.targets:
                image, _, _ = model(inp, tv.pose)
                write_tensor(out / "pred" / scene.name / f"{tv.name}.ctst", image.numpy())
                write_tensor(out / "gt" / scene.name / f"{tv.name}.ctst", tv.image)
