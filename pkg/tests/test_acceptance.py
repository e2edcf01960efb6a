"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The lines are printed in the "acceptance criteria" section at the end of the
pytest run (see conftest.py). Set GUIDEDSPLAT_WRITE_FIXTURES=1 to (re)write
the frozen toy loss curve under tests/fixtures.
"""

import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, tiny_config
from guidedsplat.cli import main
from guidedsplat.geometry import (Camera, Pose, build_covariance, gaussian_centers,
                                  project_gaussians, unproject_depth)
from guidedsplat.gradcheck import COMPONENTS, _jiggle, _random_pose, gradcheck, random_gaussians
from guidedsplat.losses import LossWeights, psnr, ssim_value, total_loss
from guidedsplat.nn_utils import seeded_init
from guidedsplat.pipeline import Checkpoint, forward, initial_model, train_toy
from guidedsplat.rasterizer import RenderSettings, rasterize, rasterize_oracle
from guidedsplat.synthetic import SyntheticSceneSpec, camera_for, make_scene
from guidedsplat.tensor_io import Config, Rng, decode_tensor, encode_tensor, read_tensor, \
    save_scene, write_tensor
from guidedsplat.transformer import MultiHeadAttention

FIXTURES = Path(__file__).parent / "fixtures"
TOY_CURVE = FIXTURES / "toy_loss_seed0.txt"
TOY_STEPS = 600
CURVE_BLOCK = 50


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")


def tiny_cli_args(cfg_path):
    return ["--config", str(cfg_path)]


def write_tiny_config(path, **changes):
    path.write_text(tiny_config(**changes).to_text())
    return path


# 1 ---------------------------------------------------------------------------
def test_01_tiled_matches_oracle():
    cam = camera_for(SyntheticSceneSpec())  # 64x96
    rng = Rng(2024)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(100):
        n = int(rng.integers(1, 513))
        g = random_gaussians(rng, n, cam, sh_degree=1)
        s = RenderSettings(background=tuple(rng.uniform(0, 1, 3)))
        pose = _random_pose(rng)
        a, b = rasterize(g, pose, cam, s), rasterize_oracle(g, pose, cam, s)
        worst = max(worst, float(np.abs(a.image - b.image).max()))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-5 and seconds <= 60
    record(1, "tiled/oracle equivalence", ok,
           f"100 scenes <=512 splats at 64x96, max|diff|={worst:.2e} (tol 1e-5), "
           f"{seconds:.1f}s (budget 60s)")
    assert ok


# 2 ---------------------------------------------------------------------------
def test_02_gradient_checks():
    lines, ok, e2e = [], True, 0.0
    for name in COMPONENTS:
        rep = gradcheck(name, Rng(0))
        worst = max(g.error for g in rep.groups)
        lines.append(f"{name}={worst:.1e}")
        ok &= rep.passed
        if name == "end_to_end":
            e2e = rep.seconds
            ok &= rep.seconds <= 120
    record(2, "finite-difference gradient checks", ok,
           " ".join(lines) + f" end_to_end_seconds={e2e:.1f} (budget 120s)")
    assert ok


# 3 ---------------------------------------------------------------------------
def test_03_structural_identities(tmp_path):
    # gate: gamma = 0 renders ignore both token files, compared at the file level
    scene, _ = make_scene(SyntheticSceneSpec(seed=9, height=16, width=24), 0)
    save_scene(tmp_path / "scene", scene)
    cfg = tiny_config(gamma=0.0)
    model = _jiggle(initial_model(cfg, Rng(1)), Rng(2))
    Checkpoint.from_model(model).save(tmp_path / "ckpt")
    renders = []
    rng = np.random.default_rng(3)
    for variant in range(3):
        if variant:
            write_tensor(tmp_path / "scene" / "text_tokens.ctst",
                         rng.normal(size=(6, 32)).astype(np.float32))
            write_tensor(tmp_path / "scene" / "point_tokens.ctst",
                         rng.normal(size=(5, 8)).astype(np.float32))
        out = tmp_path / f"r{variant}"
        assert main(["render", "--scene", str(tmp_path / "scene"), "--checkpoint",
                     str(tmp_path / "ckpt"), "--target", "p05", "--out", str(out)]) == 0
        renders.append((out / "image.ctst").read_bytes())
    gate_ok = renders[0] == renders[1] == renders[2]

    # attention rows
    worst_row = 0.0
    r = Rng(4)
    for trial in range(20):
        att = seeded_init(MultiHeadAttention(16, 4), r).double()
        q = torch.as_tensor(r.normal(0, 3, (int(r.integers(1, 30)), 16)))
        kv = torch.as_tensor(r.normal(0, 3, (int(r.integers(1, 30)), 16)))
        _, w = att(q, kv, return_weights=True)
        worst_row = max(worst_row, float((w.detach().sum(-1) - 1).abs().max()))

    # covariance eigenvalues
    sig = build_covariance(r.normal(size=(10_000, 4)), r.uniform(-9, 1, (10_000, 3)))
    min_eig = float(np.linalg.eigvalsh(sig).min())

    ok = gate_ok and worst_row <= 1e-6 and min_eig >= -1e-9
    record(3, "structural identities", ok,
           f"gamma=0 token independence={'bitwise' if gate_ok else 'BROKEN'}, "
           f"max|row sum-1|={worst_row:.1e} (tol 1e-6), min eigenvalue over 1e4 "
           f"draws={min_eig:.2e} (>= -1e-9)")
    assert ok


# 4 ---------------------------------------------------------------------------
def test_04_geometry_exactness():
    rng = Rng(5)
    uy, ux = np.mgrid[0:64, 0:96]
    pix = np.c_[ux.ravel(), uy.ravel()]
    worst = 0.0
    for _ in range(50):
        cam = Camera(rng.uniform(20, 400), rng.uniform(20, 400), rng.uniform(0, 96),
                     rng.uniform(0, 64), 96, 64)
        d = rng.uniform(0.05, 90, (64, 96))
        pts = unproject_depth(d, cam).reshape(-1, 3)
        pr = project_gaussians(pts, np.zeros((pts.shape[0], 3, 3)), Pose.identity(), cam)
        worst = max(worst, float(np.abs(pr.mean2d - pix).max()))
    offsets = np.zeros((2, 2, 1, 3))
    offsets[1, 1, 0] = (0.1, -0.1, 0.0)
    mu = gaussian_centers(np.full((2, 2), 2.0), np.full((2, 2, 1), 0.5), offsets,
                          Camera(1.0, 1.0, 0.0, 0.0, 2, 2))
    example = mu[3].tolist()
    ok = worst <= 1e-6 and example == [2.6, 2.4, 2.5]
    record(4, "geometry exactness", ok,
           f"round trip over 50 intrinsics max err={worst:.1e}px (tol 1e-6), "
           f"center example={example}")
    assert ok


# 5 ---------------------------------------------------------------------------
def _block_means(totals, block=CURVE_BLOCK):
    return [float(np.mean(totals[i:i + block])) for i in range(0, len(totals), block)]


def _read_curve(path):
    totals = []
    for line in path.read_text().splitlines():
        fields = dict(kv.split("=") for kv in line.split())
        totals.append(float(fields["total"]))
    return totals


@pytest.mark.slow
def test_05_toy_overfit():
    from guidedsplat.pipeline import format_losses

    spec = SyntheticSceneSpec(seed=0)
    scenes = [make_scene(spec, i)[0] for i in range(4)]
    cfg = Config()  # both guidances, G=2, SH degree 1, 64x96
    t0 = time.perf_counter()
    ck, history = train_toy(cfg, scenes, TOY_STEPS, Rng(0))
    train_s = time.perf_counter() - t0
    psnrs, copy = [], []
    for scene in scenes:
        for tv in scene.targets:
            img, _, _ = forward(scene, ck, tv.pose)
            psnrs.append(psnr(img, tv.image))
            copy.append(psnr(scene.image, tv.image))
    seconds = time.perf_counter() - t0
    mean_psnr = float(np.mean(psnrs))

    totals = [h["total"] for h in history]
    if os.environ.get("GUIDEDSPLAT_WRITE_FIXTURES") == "1":
        FIXTURES.mkdir(exist_ok=True)
        TOY_CURVE.write_text(format_losses(history))
    ref = _block_means(_read_curve(TOY_CURVE)) if TOY_CURVE.exists() else []
    got = _block_means(totals)
    curve_dev = max((abs(a - b) / b for a, b in zip(got, ref)), default=math.inf)
    curve_ok = len(ref) == len(got) and curve_dev <= 0.10
    decreasing = history[200]["total"] < history[0]["total"]

    ok = mean_psnr >= 25 and seconds <= 15 * 60 and curve_ok and decreasing
    record(5, "toy overfit", ok,
           f"{TOY_STEPS} steps, mean train-target PSNR={mean_psnr:.2f}dB (bar 25; "
           f"copy-source baseline {np.mean(copy):.2f}dB), {seconds:.0f}s incl. "
           f"{train_s:.0f}s training (budget 900s), loss curve max block deviation "
           f"{curve_dev:.3f} (slack 0.10), loss step200 {history[200]['total']:.4f} < "
           f"step0 {history[0]['total']:.4f}: {decreasing}")
    assert ok


# 6 ---------------------------------------------------------------------------
ABLATION_STEPS = 150


def _ablation_run(root, ablation, seed):
    """Flags-only run through the CLI; returns the held-out metrics dict."""
    size = ["--set", "image_height=32", "--set", "image_width=48"]
    run = root / f"{ablation}_{seed}"
    train_dir, held_dir = root / f"train_{seed}", root / f"held_{seed}"
    if not train_dir.exists():
        assert main(["gen-scenes", "--out", str(train_dir), "--seed", str(seed),
                     "--count", "4", *size]) == 0
        assert main(["gen-scenes", "--out", str(held_dir), "--seed", str(100 + seed),
                     "--count", "2", *size]) == 0
    assert main(["train-toy", "--scenes", str(train_dir), "--steps", str(ABLATION_STEPS),
                 "--ablation", ablation, "--seed", str(seed), "--log-every", "1000",
                 "--out", str(run), *size]) == 0
    assert main(["render", "--scene", str(held_dir), "--checkpoint", str(run / "checkpoint"),
                 "--all-targets", "--out", str(run / "held")]) == 0
    assert main(["eval", "--pred", str(run / "held" / "pred"), "--gt",
                 str(run / "held" / "gt"), "--out", str(run / "report.txt")]) == 0
    return {k: float(v) for k, v in
            (line.split("=") for line in (run / "report.txt").read_text().splitlines())}


@pytest.mark.slow
def test_06_ablation_mechanics(tmp_path, capsys):
    t0 = time.perf_counter()
    reports = {a: _ablation_run(tmp_path, a, 0)
               for a in ("baseline", "contextual", "spatial", "both")}
    runs_ok = all(math.isfinite(r["mean_psnr"]) and "mean_ssim" in r for r in reports.values())
    base, ctx = [reports["baseline"]["mean_psnr"]], [reports["contextual"]["mean_psnr"]]
    for seed in range(1, 5):
        base.append(_ablation_run(tmp_path, "baseline", seed)["mean_psnr"])
        ctx.append(_ablation_run(tmp_path, "contextual", seed)["mean_psnr"])
    capsys.readouterr()
    soft = "holds" if np.mean(ctx) >= np.mean(base) else "does not hold (soft check)"
    table = " ".join(f"{a}={r['mean_psnr']:.2f}/{r['mean_ssim']:.3f}" for a, r in reports.items())
    record(6, "ablation mechanics", runs_ok,
           f"4 configs from flags, held-out PSNR/SSIM seed 0: {table}; contextual vs "
           f"baseline over 5 seeds: {np.mean(ctx):.2f} vs {np.mean(base):.2f}dB "
           f"(per seed ctx {[round(x, 2) for x in ctx]} base {[round(x, 2) for x in base]}), "
           f"ordering {soft}; {time.perf_counter() - t0:.0f}s")
    assert runs_ok


# 7 ---------------------------------------------------------------------------
def test_07_metrics_exactness():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 0.9, (64, 96, 3))
    s_err = abs(ssim_value(x, x) - 1.0)
    p_err = abs(psnr(x, x + 0.1) - 20.0)
    w = LossWeights()
    example = w.lambda_l1 * 0.1 + w.lambda_ssim * (1 - 0.8) + w.lambda_lpips * 0.0
    br = total_loss(torch.as_tensor(x), torch.as_tensor(x[::-1].copy()), w,
                    lpips=lambda p, t: (p - t).abs().mean() * 3)
    f = br.as_floats()
    identity = f["total"] == w.lambda_l1 * f["l1"] + w.lambda_ssim * f["ssim_loss"] + \
        w.lambda_lpips * f["lpips_loss"]
    ok = s_err <= 1e-9 and p_err <= 1e-6 and abs(example - 0.27) <= 1e-15 and identity
    record(7, "metrics exactness", ok,
           f"|SSIM(x,x)-1|={s_err:.1e} (tol 1e-9), |PSNR-20|={p_err:.1e} (tol 1e-6), "
           f"weighted example={example!r}, breakdown identity exact={identity}")
    assert ok


# 8 ---------------------------------------------------------------------------
def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.ctst"))}


def test_08_determinism(tmp_path):
    cfg = write_tiny_config(tmp_path / "tiny.txt")
    assert main(["gen-scenes", "--out", str(tmp_path / "scenes"), "--count", "2",
                 "--seed", "3", *tiny_cli_args(cfg)]) == 0
    runs = []
    for tag, threads in (("a", 1), ("b", 1), ("c", 2), ("d", 8)):
        out = tmp_path / f"run_{tag}"
        assert main(["train-toy", "--scenes", str(tmp_path / "scenes"), "--steps", "4",
                     "--seed", "11", "--log-every", "1000", "--out", str(out),
                     *tiny_cli_args(cfg), "--set", f"threads={threads}"]) == 0
        runs.append(((out / "losses.txt").read_bytes(), _tree(out / "checkpoint")))
    train_ok = all(r == runs[0] for r in runs[1:])
    renders = []
    for tag, threads in (("a", 1), ("b", 1), ("c", 2), ("d", 8)):
        out = tmp_path / f"render_{tag}"
        assert main(["render", "--scene", str(tmp_path / "scenes" / "scene_000"),
                     "--checkpoint", str(tmp_path / "run_a" / "checkpoint"), "--target", "m10",
                     "--threads", str(threads), "--transmittance", "--out", str(out)]) == 0
        renders.append(_tree(out))
    render_ok = all(r == renders[0] for r in renders[1:])
    ok = train_ok and render_ok
    record(8, "determinism", ok,
           f"train-toy bitwise equal over 2 runs and threads {{1,2,8}}: {train_ok}; "
           f"render bitwise equal over 2 runs and threads {{1,2,8}}: {render_ok}")
    assert ok


# 9 ---------------------------------------------------------------------------
def test_09_format_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    bad = 0
    for i in range(1000):
        rank = int(rng.integers(0, 5))
        shape = tuple(int(s) for s in rng.integers(0, 6, rank))
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        a = rng.normal(0, 10 ** rng.uniform(-30, 30), shape).astype(dtype)
        if a.size and rng.random() < 0.2:
            a.ravel()[0] = rng.choice([np.nan, np.inf, -np.inf, -0.0])
        p = tmp_path / f"{i}.ctst"
        write_tensor(p, a)
        b = read_tensor(p)
        same = b.dtype == a.dtype and b.shape == a.shape and a.tobytes() == b.tobytes() \
            and decode_tensor(encode_tensor(b)).tobytes() == b.tobytes()
        bad += not same
    shutil.rmtree(tmp_path)
    record(9, "format round trip", bad == 0, f"1000 random tensors, {bad} mismatches")
    assert bad == 0
