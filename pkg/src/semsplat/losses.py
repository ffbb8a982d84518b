"""Three-term mapping loss: color (L1 + SSIM), semantic cosine similarity,
and masked depth L1 — each with an analytic gradient image."""

import warnings
from dataclasses import dataclass

import cv2
import numpy as np

from .scene import FrameBundle, LossConfig

_EPS_NORM = 1e-8


class ShapeMismatch(ValueError):
    pass


@dataclass
class LossBreakdown:
    l_color: float
    l_cossim: float
    l_depth: float
    total: float
    feature_missing: bool = False


def _gaussian_window(size, sigma=1.5):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _gaussian_taps(size, sigma=1.5):
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, taps):
    """Separable symmetric filter, 'valid' output (fully interior windows)."""
    half = taps.size // 2
    out = cv2.sepFilter2D(img, cv2.CV_64F, taps, taps,
                          borderType=cv2.BORDER_CONSTANT)
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def _filter_full(img, taps):
    """Separable symmetric filter, 'full' output (zero-padded convolution)."""
    half = taps.size // 2
    padded = np.zeros((img.shape[0] + 2 * half, img.shape[1] + 2 * half))
    padded[half:-half, half:-half] = img
    return cv2.sepFilter2D(padded, cv2.CV_64F, taps, taps,
                           borderType=cv2.BORDER_CONSTANT)


def _ssim_channel(x, y, win, c1, c2):
    """SSIM map over valid window positions of one channel, plus the partials
    needed for the gradient w.r.t. x."""
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x ** 2
    syy = _filter_valid(y * y, win) - mu_y ** 2
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    n1 = 2 * mu_x * mu_y + c1
    n2 = 2 * sxy + c2
    d1 = mu_x ** 2 + mu_y ** 2 + c1
    d2 = sxx + syy + c2
    s = (n1 * n2) / (d1 * d2)
    d_mux = 2 * (mu_y * n2 * d1 - mu_x * n1 * n2) / (d1 * d1 * d2)
    d_sxx = -s / d2
    d_sxy = 2 * n1 / (d1 * d2)
    return s, (mu_x, mu_y, d_mux, d_sxx, d_sxy)


def ssim(a, b, window=11, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean SSIM over valid (fully-interior) windows; channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    win = _gaussian_taps(window)
    total = 0.0
    for c in range(a.shape[2]):
        s, _ = _ssim_channel(a[:, :, c], b[:, :, c], win, c1, c2)
        total += s.mean()
    return total / a.shape[2]


def ssim_with_grad(x, y, window=11, c1=0.01 ** 2, c2=0.03 ** 2):
    """(mean SSIM, d meanSSIM / dx). y is the reference (no gradient)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim shapes {x.shape} vs {y.shape}")
    squeeze = x.ndim == 2
    if squeeze:
        x, y = x[:, :, None], y[:, :, None]
    win = _gaussian_taps(window)
    nch = x.shape[2]
    grad = np.zeros_like(x)
    total = 0.0
    for c in range(nch):
        xc, yc = x[:, :, c], y[:, :, c]
        s, (mu_x, mu_y, d_mux, d_sxx, d_sxy) = _ssim_channel(xc, yc, win, c1, c2)
        nwin = s.size * nch
        a = d_mux / nwin
        bmat = d_sxx / nwin
        cmat = d_sxy / nwin
        # mu_x(p) = sum_q w(q-p) x(q); sxx has the 2x - 2mu_x path; sxy the y - mu_y path
        g = _filter_full(a, win)
        g += 2 * xc * _filter_full(bmat, win)
        g -= 2 * _filter_full(mu_x * bmat, win)
        g += yc * _filter_full(cmat, win)
        g -= _filter_full(mu_y * cmat, win)
        grad[:, :, c] = g
        total += s.sum() / nwin
    if squeeze:
        grad = grad[:, :, 0]
    return total, grad


def loss_color(i_pred, i_gt, cfg: LossConfig):
    """(1-lambda)*L1 + lambda*(1 - SSIM), with gradient w.r.t. i_pred."""
    i_pred = np.asarray(i_pred, dtype=np.float64)
    i_gt = np.asarray(i_gt, dtype=np.float64)
    if i_pred.shape != i_gt.shape:
        raise ShapeMismatch(f"color shapes {i_pred.shape} vs {i_gt.shape}")
    cfg.validate()
    lam = cfg.lambda_ssim
    diff = i_pred - i_gt
    l1 = np.abs(diff).mean()
    grad = (1 - lam) * np.sign(diff) / diff.size
    if lam > 0:
        s, gs = ssim_with_grad(i_pred, i_gt, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
        value = (1 - lam) * l1 + lam * (1.0 - s)
        grad = grad - lam * gs
    else:
        value = l1
    return float(value), grad


def loss_cossim(l_pred, l_gt):
    """Mean over valid pixels of 1 - cos(pred, gt); pixels whose ground-truth
    feature norm is below 1e-8 are excluded. Returns (value, grad)."""
    l_pred = np.asarray(l_pred, dtype=np.float64)
    l_gt = np.asarray(l_gt, dtype=np.float64)
    if l_pred.shape != l_gt.shape:
        raise ShapeMismatch(f"feature shapes {l_pred.shape} vs {l_gt.shape}")
    gn = np.linalg.norm(l_gt, axis=-1)
    valid = gn >= _EPS_NORM
    nvalid = int(np.count_nonzero(valid))
    grad = np.zeros_like(l_pred)
    if nvalid == 0:
        warnings.warn("loss_cossim: no valid pixels, defined as 0")
        return 0.0, grad
    pn = np.maximum(np.linalg.norm(l_pred, axis=-1), _EPS_NORM)
    dot = np.sum(l_pred * l_gt, axis=-1)
    cos = np.where(valid, dot / (pn * gn.clip(_EPS_NORM)), 0.0)
    value = float((1.0 - cos[valid]).mean())
    # d(1-cos)/dpred = -gt/(|p||g|) + cos * pred/|p|^2
    coef = valid / nvalid
    grad = (-l_gt / (pn * gn.clip(_EPS_NORM))[..., None]
            + cos[..., None] * l_pred / (pn ** 2)[..., None]) * coef[..., None]
    return value, grad


def loss_depth(d_pred, d_gt):
    """Mean absolute difference over pixels with valid (positive) ground truth."""
    d_pred = np.asarray(d_pred, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_pred.shape != d_gt.shape:
        raise ShapeMismatch(f"depth shapes {d_pred.shape} vs {d_gt.shape}")
    valid = d_gt > 0
    nvalid = int(np.count_nonzero(valid))
    grad = np.zeros_like(d_pred)
    if nvalid == 0:
        warnings.warn("loss_depth: no valid pixels, defined as 0")
        return 0.0, grad
    diff = d_pred - d_gt
    value = float(np.abs(diff[valid]).mean())
    grad[valid] = np.sign(diff[valid]) / nvalid
    return value, grad


def loss_depth_expected(accum_depth, alpha, d_gt, alpha_min=0.5):
    """Mean absolute error of the expected depth (accumulated depth divided
    by alpha) where ground truth is valid and coverage is sufficient. The raw
    accumulated depth is biased low by the per-pixel alpha; penalizing it
    directly pushes splats behind the true surface to compensate, warping the
    geometry by (1-alpha) * depth. Returns (value, d_accum, d_alpha)."""
    accum_depth = np.asarray(accum_depth, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if accum_depth.shape != d_gt.shape:
        raise ShapeMismatch(f"depth shapes {accum_depth.shape} vs {d_gt.shape}")
    valid = (d_gt > 0) & (alpha >= alpha_min)
    g_accum = np.zeros_like(accum_depth)
    g_alpha = np.zeros_like(alpha)
    nvalid = int(np.count_nonzero(valid))
    if nvalid == 0:
        return 0.0, g_accum, g_alpha
    a = np.maximum(alpha, 1e-3)
    diff = accum_depth / a - d_gt
    value = float(np.abs(diff[valid]).mean())
    s = np.where(valid, np.sign(diff), 0.0) / nvalid
    g_accum = s / a
    g_alpha = -s * accum_depth / (a * a)
    return value, g_accum, g_alpha


def total_loss(render_out, frame: FrameBundle, cfg: LossConfig):
    """Unit-weight sum of the three terms. frame.feature, when present, must
    already be at the render resolution. Returns (LossBreakdown, upstream)
    where upstream holds d_rgb / d_feature / d_depth for the rasterizer."""
    lc, g_rgb = loss_color(render_out.rgb, frame.rgb, cfg)
    ld, g_depth, g_alpha = loss_depth_expected(render_out.depth, render_out.alpha,
                                               frame.depth)
    missing = frame.feature is None
    if missing:
        ls, g_feat = 0.0, np.zeros_like(render_out.feature)
    else:
        if frame.feature.shape != render_out.feature.shape:
            raise ShapeMismatch(
                f"frame feature {frame.feature.shape} not at render resolution "
                f"{render_out.feature.shape}")
        ls, g_feat = loss_cossim(render_out.feature, frame.feature)
    breakdown = LossBreakdown(l_color=lc, l_cossim=ls, l_depth=ld,
                              total=lc + ls + ld, feature_missing=missing)
    upstream = {"d_rgb": g_rgb, "d_feature": g_feat, "d_depth": g_depth,
                "d_alpha": g_alpha}
    return breakdown, upstream
