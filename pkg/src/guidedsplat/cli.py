"""``guidedsplat`` command line tool.

Exit codes: 0 success, 1 a check or input validation failed, 2 bad usage
(unknown names, unreadable config, missing inputs).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, MissingInput, SplatError, UsageError
from .tensor_io import Rng, load_config, load_scene, parse_overrides, read_tensor, write_tensor

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output path")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")


def _config(args, extra=()):
    return load_config(args.config, list(args.set) + list(extra))


def _scene_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "image.ctst").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "image.ctst").exists()) \
        if root.is_dir() else []
    if not dirs:
        raise MissingInput(f"no scene directories under {root}")
    return dirs


def cmd_gen_scenes(args) -> int:
    from .synthetic import SyntheticSceneSpec, gen_scenes

    cfg = _config(args)
    spec = SyntheticSceneSpec(seed=args.seed, n_scenes=args.count, n_objects=args.objects,
                              height=cfg.image_height, width=cfg.image_width,
                              text_dim=cfg.text_dim)
    for p in gen_scenes(spec, args.out):
        print(p)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .pipeline import ABLATIONS, format_losses, train_toy

    extra = [f"{k}={v}" for k, v in ABLATIONS[args.ablation].items()] if args.ablation else []
    cfg = _config(args, extra)
    scenes = [load_scene(d, cfg) for d in _scene_dirs(args.scenes)]
    out = Path(args.out)

    def log(step, rec):
        if step % args.log_every == 0 or step == args.steps - 1:
            print(f"step={step} " + " ".join(f"{k}={v:.6f}" for k, v in rec.items()),
                  flush=True)

    ckpt, history = train_toy(cfg, scenes, args.steps, Rng(args.seed), log=log,
                              dump_dir=out / "diagnostics")
    ckpt.save(out / "checkpoint")
    (out / "losses.txt").write_text(format_losses(history))
    print(f"checkpoint={out / 'checkpoint'}")
    return EXIT_OK


def cmd_render(args) -> int:
    import torch

    from .pipeline import Checkpoint, prepare_inputs, render_targets

    ckpt = Checkpoint.load(args.checkpoint)
    overrides = list(args.set) + ([f"threads={args.threads}"] if args.threads else [])
    if args.config or overrides:
        base = load_config(args.config) if args.config else ckpt.config
        ckpt.config = parse_overrides(overrides, base)
    if args.all_targets:
        scenes = [load_scene(d, ckpt.config) for d in _scene_dirs(args.scene)]
        render_targets(ckpt, scenes, args.out)
        print(f"pred={Path(args.out) / 'pred'} gt={Path(args.out) / 'gt'}")
        return EXIT_OK
    scene = load_scene(args.scene, ckpt.config)
    if args.pose:
        pose = read_tensor(args.pose)
    elif args.target:
        match = [t for t in scene.targets if t.name == args.target]
        if not match:
            raise UsageError(f"scene has no target view {args.target!r}")
        pose = match[0].pose
    else:
        pose = scene.pose
    model = ckpt.to_model()
    with torch.no_grad():
        image, _, out = model(prepare_inputs(scene, ckpt.config), pose)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "image.ctst", image.numpy())
    if args.transmittance:
        write_tensor(d / "transmittance.ctst", out.transmittance)
    print(f"image={d / 'image.ctst'} culled={out.n_culled}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate, format_report

    text = format_report(evaluate(args.pred, args.gt))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import COMPONENTS, gradcheck

    names = list(COMPONENTS) if args.component == "all" else [args.component]
    ok = True
    lines = []
    for name in names:
        report = gradcheck(name, Rng(args.seed))
        print(report.format(), flush=True)
        lines.append(report.format())
        ok &= report.passed
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="guidedsplat",
                                description="Single-view Gaussian splatting with guidance tokens")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="write ray-traced synthetic scenes")
    _common(g)
    g.add_argument("--count", type=int, default=4)
    g.add_argument("--objects", type=int, default=3)
    g.set_defaults(func=cmd_gen_scenes)

    t = sub.add_parser("train-toy", help="train on scene directories")
    _common(t)
    t.add_argument("--scenes", required=True, help="scene directory or a directory of scenes")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--ablation", choices=("baseline", "contextual", "spatial", "both"))
    t.add_argument("--log-every", type=int, default=50)
    t.set_defaults(func=cmd_train_toy)

    r = sub.add_parser("render", help="render a scene with a checkpoint")
    _common(r)
    r.add_argument("--scene", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--target", help="target view name inside the scene")
    r.add_argument("--pose", help="4x4 world-from-camera pose file (.ctst)")
    r.add_argument("--threads", type=int, default=0, help="rasterizer worker threads")
    r.add_argument("--transmittance", action="store_true", help="also write transmittance.ctst")
    r.add_argument("--all-targets", action="store_true",
                   help="render every target view of every scene under --scene into "
                        "OUT/pred and copy ground truth to OUT/gt")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM report for two directories of images")
    _common(e, out_required=False)
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(c, out_required=False)
    c.add_argument("component", help="component name or 'all'")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, MissingInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
