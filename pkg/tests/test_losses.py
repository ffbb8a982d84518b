import numpy as np
import pytest

from semsplat.losses import (LossBreakdown, ShapeMismatch, loss_color,
                             loss_cossim, loss_depth, ssim, ssim_with_grad,
                             total_loss)
from semsplat.scene import FrameBundle, LossConfig

rng = np.random.default_rng(2)


def fd_check(value_grad_fn, x, grad, h=1e-6, tol=1e-4):
    """Spot-check a handful of entries of an analytic gradient."""
    flat = x.ravel()
    idx = rng.choice(flat.size, size=min(20, flat.size), replace=False)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = value_grad_fn(x)
        flat[i] = orig - h
        fm = value_grad_fn(x)
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        assert abs(grad.ravel()[i] - fd) < tol, f"entry {i}: {grad.ravel()[i]} vs {fd}"


# --- SSIM ---

def test_ssim_identical_images():
    img = rng.uniform(0, 1, (24, 32, 3))
    assert ssim(img, img) == pytest.approx(1.0)


def test_ssim_decreases_with_noise():
    img = rng.uniform(0, 1, (24, 32, 3))
    a = ssim(img, np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1))
    b = ssim(img, np.clip(img + rng.normal(0, 0.3, img.shape), 0, 1))
    assert 1.0 > a > b


def test_ssim_symmetric():
    a = rng.uniform(0, 1, (20, 20, 3))
    b = rng.uniform(0, 1, (20, 20, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a))


def test_ssim_grad_matches_fd():
    x = rng.uniform(0.2, 0.8, (16, 16, 3))
    y = rng.uniform(0.2, 0.8, (16, 16, 3))
    s, g = ssim_with_grad(x, y)
    assert s == pytest.approx(ssim(x, y))
    fd_check(lambda xx: ssim_with_grad(xx, y)[0], x, g)


# --- color ---

def test_loss_color_zero_on_match():
    img = rng.uniform(0, 1, (16, 16, 3))
    v, g = loss_color(img, img, LossConfig())
    assert v == pytest.approx(0.0, abs=1e-12)


def test_loss_color_pure_l1():
    cfg = LossConfig(lambda_ssim=0.0)
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.5)
    v, g = loss_color(a, b, cfg)
    assert v == pytest.approx(0.5)
    assert np.allclose(g, -1.0 / a.size)


def test_loss_color_grad_matches_fd():
    cfg = LossConfig()
    x = rng.uniform(0.2, 0.8, (16, 16, 3))
    y = rng.uniform(0.2, 0.8, (16, 16, 3))
    v, g = loss_color(x, y, cfg)
    fd_check(lambda xx: loss_color(xx, y, cfg)[0], x, g)


def test_loss_color_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_color(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), LossConfig())


# --- cosine similarity ---

def test_loss_cossim_zero_on_match():
    f = rng.normal(size=(8, 8, 4))
    v, g = loss_cossim(f, f)
    assert v == pytest.approx(0.0, abs=1e-12)


def test_loss_cossim_orthogonal():
    pred = np.zeros((2, 2, 2))
    gt = np.zeros((2, 2, 2))
    pred[..., 0] = 1.0
    gt[..., 1] = 1.0
    v, _ = loss_cossim(pred, gt)
    assert v == pytest.approx(1.0)


def test_loss_cossim_ignores_zero_gt_pixels():
    pred = rng.normal(size=(4, 4, 3))
    gt = np.zeros((4, 4, 3))
    gt[0, 0] = pred[0, 0]  # only valid pixel matches exactly
    v, g = loss_cossim(pred, gt)
    assert v == pytest.approx(0.0, abs=1e-12)
    assert np.all(g[1:] == 0)


def test_loss_cossim_grad_matches_fd():
    pred = rng.normal(size=(8, 8, 4))
    gt = rng.normal(size=(8, 8, 4))
    v, g = loss_cossim(pred, gt)
    fd_check(lambda p: loss_cossim(p, gt)[0], pred, g)


# --- depth ---

def test_loss_depth_ignores_invalid():
    pred = np.full((4, 4), 2.0)
    gt = np.zeros((4, 4))
    gt[0, 0] = 1.0
    v, g = loss_depth(pred, gt)
    assert v == pytest.approx(1.0)
    assert g[0, 0] == pytest.approx(1.0)
    assert np.count_nonzero(g) == 1


def test_loss_depth_all_invalid_warns():
    with pytest.warns(UserWarning):
        v, g = loss_depth(np.ones((3, 3)), np.zeros((3, 3)))
    assert v == 0.0


def test_loss_depth_grad_matches_fd():
    pred = rng.uniform(1, 3, (8, 8))
    gt = rng.uniform(1, 3, (8, 8))
    v, g = loss_depth(pred, gt)
    fd_check(lambda p: loss_depth(p, gt)[0], pred, g)


# --- total ---

class _Out:
    def __init__(self, h, w, k):
        self.rgb = rng.uniform(0, 1, (h, w, 3))
        self.feature = rng.normal(size=(h, w, k))
        self.depth = rng.uniform(1, 3, (h, w))
        self.alpha = rng.uniform(0, 1, (h, w))


def test_total_loss_sums_terms():
    out = _Out(16, 16, 3)
    frame = FrameBundle(rgb=rng.uniform(0, 1, (16, 16, 3)),
                        depth=rng.uniform(1, 3, (16, 16)),
                        feature=rng.normal(size=(16, 16, 3)))
    bd, up = total_loss(out, frame, LossConfig())
    assert bd.total == pytest.approx(bd.l_color + bd.l_cossim + bd.l_depth)
    assert not bd.feature_missing
    assert up["d_rgb"].shape == out.rgb.shape
    assert up["d_feature"].shape == out.feature.shape


def test_total_loss_missing_feature():
    out = _Out(16, 16, 3)
    frame = FrameBundle(rgb=rng.uniform(0, 1, (16, 16, 3)),
                        depth=rng.uniform(1, 3, (16, 16)))
    bd, up = total_loss(out, frame, LossConfig())
    assert bd.feature_missing and bd.l_cossim == 0.0
    assert np.all(up["d_feature"] == 0)


def test_total_loss_feature_resolution_mismatch():
    out = _Out(16, 16, 3)
    frame = FrameBundle(rgb=rng.uniform(0, 1, (16, 16, 3)),
                        depth=rng.uniform(1, 3, (16, 16)),
                        feature=rng.normal(size=(4, 4, 3)))
    with pytest.raises(ShapeMismatch):
        total_loss(out, frame, LossConfig())
