import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import tiny_config
from guidedsplat.errors import ConfigError, MissingInput, TrainingError, ValidationError
from guidedsplat.gradcheck import _jiggle
from guidedsplat.pipeline import (ABLATIONS, STAGES, Checkpoint, evaluate, evaluate_pairs,
                                  format_report, forward, initial_model, prepare_inputs,
                                  train_toy)
from guidedsplat.tensor_io import Rng, write_tensor


def ckpt(config=None, seed=0, jiggle=False):
    """Initial checkpoint; ``jiggle`` perturbs the zero-initialized heads so the
    output actually depends on the guidance path."""
    config = config or tiny_config()
    model = initial_model(config, Rng(seed))
    if jiggle:
        _jiggle(model, Rng(seed + 100))
    return Checkpoint.from_model(model)


def test_trace_follows_stage_order(tiny_scenes):
    trace = []
    scene = tiny_scenes[0]
    forward(scene, ckpt(), scene.targets[0].pose, trace=trace)
    assert [e for e in trace if e in STAGES] == list(STAGES)
    # the transformer runs its levels between encode_points and the transformer marker
    start, stop = trace.index("encode_points"), trace.index("transformer")
    assert trace[start + 1:stop].count("gated_add_norm") == 3


def test_gamma_zero_output_ignores_token_files(tiny_scenes):
    cfg = tiny_config(gamma=0.0)
    c = ckpt(cfg, jiggle=True)
    scene = tiny_scenes[0]
    pose = scene.targets[1].pose
    ref, _, _ = forward(scene, c, pose)
    rng = np.random.default_rng(0)
    for _ in range(2):
        other = replace(scene, text_tokens=rng.normal(size=(5, 32)).astype(np.float32),
                        point_tokens=rng.normal(size=(7, 8)).astype(np.float32))
        img, _, _ = forward(other, c, pose)
        assert img.tobytes() == ref.tobytes()
    with_gate, _, _ = forward(scene, ckpt(tiny_config(gamma=0.5), jiggle=True), pose)
    assert with_gate.tobytes() != ref.tobytes()


def test_point_token_override_is_used(tiny_scenes):
    c = ckpt(jiggle=True)
    scene = tiny_scenes[0]
    a, _, _ = forward(scene, c, scene.pose)
    tokens = np.random.default_rng(1).normal(size=(9, 8)).astype(np.float32)
    b, _, _ = forward(replace(scene, point_tokens=tokens), c, scene.pose)
    assert a.tobytes() != b.tobytes()


def test_eval_forward_is_deterministic(tiny_scenes):
    c, scene = ckpt(), tiny_scenes[1]
    a, ga, _ = forward(scene, c, scene.targets[0].pose)
    b, gb, _ = forward(scene, c, scene.targets[0].pose)
    assert a.tobytes() == b.tobytes() and ga.means.tobytes() == gb.means.tobytes()


def test_ablations_are_distinct_and_runnable(tiny_scenes):
    scene = tiny_scenes[0]
    images = {}
    for name, flags in ABLATIONS.items():
        img, _, _ = forward(scene, ckpt(tiny_config(**flags), jiggle=True), scene.targets[0].pose)
        assert np.all(np.isfinite(img))
        images[name] = img.tobytes()
    assert len(set(images.values())) == 4
    assert len({tuple(sorted(f.items())) for f in ABLATIONS.values()}) == 4


def test_dimension_mismatch_is_config_error(tiny_scenes):
    with pytest.raises(ConfigError):
        prepare_inputs(tiny_scenes[0], tiny_config(image_height=32))
    with pytest.raises(ConfigError):
        prepare_inputs(tiny_scenes[0], tiny_config(text_dim=16))
    bad = replace(tiny_scenes[0], point_tokens=np.zeros((3, 5), np.float32))
    with pytest.raises(ConfigError):
        prepare_inputs(bad, tiny_config())


def test_checkpoint_round_trip_bytes(tmp_path):
    c = ckpt()
    c.save(tmp_path / "a")
    loaded = Checkpoint.load(tmp_path / "a")
    assert loaded.equals(c)
    loaded.save(tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    with pytest.raises(MissingInput):
        Checkpoint.load(tmp_path / "absent")


def test_checkpoint_shape_mismatch_rejected():
    c = ckpt()
    other = Checkpoint(tiny_config(decoder_width=4), c.tensors, 0)
    with pytest.raises(ConfigError):
        other.to_model()


def test_zero_steps_equals_initialization(tiny_scenes):
    cfg = tiny_config()
    trained, history = train_toy(cfg, tiny_scenes, 0, Rng(4))
    assert history == [] and trained.equals(ckpt(cfg, seed=4))


def test_training_is_reproducible_and_learns(tiny_scenes):
    cfg = tiny_config(lr=1e-3)
    a, ha = train_toy(cfg, tiny_scenes, 6, Rng(2))
    b, hb = train_toy(cfg, tiny_scenes, 6, Rng(2))
    assert ha == hb and a.equals(b)
    assert not a.equals(ckpt(cfg, seed=2))
    assert a.step == 6 and len(ha) == 6
    assert all(set(r) == {"l1", "ssim_loss", "lpips_loss", "total"} for r in ha)
    _, hc = train_toy(cfg, tiny_scenes, 6, Rng(3))
    assert hc != ha


def test_nan_loss_aborts_with_dump(tiny_scenes, tmp_path):
    def broken(pred, target):
        return torch.full((), math.nan, dtype=pred.dtype)

    with pytest.raises(TrainingError, match="step 0"):
        train_toy(tiny_config(), tiny_scenes, 3, Rng(0), lpips=broken, dump_dir=tmp_path)
    dump = tmp_path / "nan_step_000000"
    assert (dump / "checkpoint" / "manifest.txt").exists()
    report = (dump / "report.txt").read_text()
    assert "lpips_loss=nan" in report and "scene=" in report


def test_training_preconditions(tiny_scenes):
    with pytest.raises(ValidationError):
        train_toy(tiny_config(), [], 1, Rng(0))
    with pytest.raises(ValidationError):
        train_toy(tiny_config(), [replace(tiny_scenes[0], targets=[])], 1, Rng(0))


def test_evaluate_pairs_examples():
    rng = np.random.default_rng(5)
    imgs = {n: rng.uniform(0, 0.8, (16, 16, 3)) for n in ("b.ctst", "a.ctst")}
    rows = dict(evaluate_pairs(imgs, imgs))
    assert rows["psnr[a.ctst]"] == math.inf and abs(rows["ssim[b.ctst]"] - 1) <= 1e-9
    shifted = dict(imgs, **{"b.ctst": imgs["b.ctst"] + 0.1})
    rows = evaluate_pairs(shifted, imgs)
    assert abs(dict(rows)["psnr[b.ctst]"] - 20.0) <= 1e-6
    assert [k for k, _ in rows] == ["psnr[a.ctst]", "ssim[a.ctst]", "psnr[b.ctst]",
                                    "ssim[b.ctst]", "mean_psnr", "mean_ssim"]
    with pytest.raises(ValidationError):
        evaluate_pairs({"a.ctst": imgs["a.ctst"]}, imgs)
    with pytest.raises(ValidationError):
        evaluate_pairs({"a.ctst": imgs["a.ctst"], "c.ctst": imgs["b.ctst"]}, imgs)


def test_evaluate_directories(tmp_path):
    rng = np.random.default_rng(6)
    for sub in ("pred", "gt"):
        (tmp_path / sub / "s0").mkdir(parents=True)
    img = rng.uniform(0, 1, (16, 16, 3))
    write_tensor(tmp_path / "pred" / "s0" / "t.ctst", img)
    write_tensor(tmp_path / "gt" / "s0" / "t.ctst", img)
    text = format_report(evaluate(tmp_path / "pred", tmp_path / "gt"))
    assert text.splitlines()[0] == "psnr[s0/t.ctst]=inf"
    assert "mean_ssim=1.0" in text
