import numpy as np
import pytest

from guidedsplat.geometry import Camera
from guidedsplat.gradcheck import random_gaussians
from guidedsplat.synthetic import SyntheticSceneSpec, make_scene
from guidedsplat.tensor_io import Config, Rng

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {key}. {title}: {detail}")


def tiny_config(**changes) -> Config:
    base = Config(image_height=16, image_width=24, encoder_widths=(8, 16, 16), heads=4,
                  decoder_width=8, point_dim=8, n_points=16, text_dim=32)
    return base.replace(**changes)


@pytest.fixture(scope="session")
def tiny_scenes():
    spec = SyntheticSceneSpec(seed=3, n_scenes=2, height=16, width=24)
    return [make_scene(spec, i)[0] for i in range(spec.n_scenes)]


@pytest.fixture
def cam():
    return Camera(fx=60.0, fy=62.0, cx=23.7, cy=15.2, width=48, height=32)


@pytest.fixture
def gaussians(cam):
    return random_gaussians(Rng(11), 40, cam)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
