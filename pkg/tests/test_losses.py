import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from guidedsplat.errors import ShapeError, ValidationError
from guidedsplat.losses import (LossWeights, l1_loss, psnr, ssim, ssim_map, ssim_value, total_loss)


def images(seed, shape=(16, 24, 3)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)


def skimage_ssim_map(a, b):
    _, full = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, win_size=11,
                                    use_sample_covariance=False, data_range=1.0,
                                    channel_axis=-1, full=True)
    return full


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_reference(seed):
    # the reference crops the border before averaging; compare the full maps
    a, b = images(seed)
    b = 0.6 * a + 0.4 * b
    ours = ssim_map(a, b).numpy()
    assert np.abs(ours - skimage_ssim_map(a, b)).max() <= 1e-9
    assert abs(ssim_value(a, b) - ours.mean()) <= 1e-15


def test_ssim_identities():
    a, b = images(5)
    assert abs(ssim_value(a, a) - 1.0) <= 1e-9
    assert ssim_value(a, b) == pytest.approx(ssim_value(b, a), abs=1e-15)
    assert -1 <= ssim_value(a, b) < 1
    assert ssim_value(a, a + 1e-3) < 1
    with pytest.raises(ValidationError):
        ssim(a[:10], b[:10])


def test_ssim_constant_images_closed_form():
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    c1 = 0.01 ** 2
    expected = c1 / (1 + c1)  # means 0 and 1, zero variance and covariance
    assert abs(ssim_value(a, b) - expected) <= 1e-12


def test_l1_examples():
    a, _ = images(6)
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(a, a + 0.1)) == pytest.approx(0.1, abs=1e-12)
    _, b = images(7)
    assert float(l1_loss(a, b)) == float(l1_loss(b, a))
    with pytest.raises(ShapeError):
        l1_loss(a, a[:3])


def test_weighted_total_example():
    # l1 = 0.1, ssim = 0.8, lpips stub 0 -> 0.27 with the default weights
    w = LossWeights()
    total = w.lambda_l1 * 0.1 + w.lambda_ssim * (1 - 0.8) + w.lambda_lpips * 0.0
    assert abs(total - 0.27) <= 1e-15


def test_breakdown_identity_is_exact():
    a, b = images(8)
    w = LossWeights(1.0, 0.85, 0.01)
    br = total_loss(torch.as_tensor(a), torch.as_tensor(b), w,
                    lpips=lambda p, t: (p - t).pow(2).mean())
    f = br.as_floats()
    assert f["total"] == w.lambda_l1 * f["l1"] + w.lambda_ssim * f["ssim_loss"] + \
        w.lambda_lpips * f["lpips_loss"]
    same = total_loss(a, a)
    assert float(same.total) == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValidationError):
        LossWeights(lambda_ssim=-1.0)


def test_psnr_examples():
    a, _ = images(9)
    assert abs(psnr(a, a + 0.1) - 20.0) <= 1e-6
    assert psnr(a, a) == math.inf
    vals = [psnr(a, a + d) for d in (0.01, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_total_loss_gradient_matches_differences():
    a, b = images(10)
    pred = torch.as_tensor(a, dtype=torch.float64).requires_grad_(True)
    target = torch.as_tensor(b)
    total_loss(pred, target).total.backward()
    g = pred.grad.numpy()
    rng = np.random.default_rng(11)
    h = 1e-5
    for idx in zip(*(rng.integers(0, n, 24) for n in a.shape)):
        x = a.copy()
        x[idx] += h
        fp = float(total_loss(x, b).total)
        x[idx] -= 2 * h
        fm = float(total_loss(x, b).total)
        num = (fp - fm) / (2 * h)
        assert abs(g[idx] - num) <= 1e-5 * max(abs(g[idx]), abs(num), 1e-8)
