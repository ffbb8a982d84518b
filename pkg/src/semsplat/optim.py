"""Map optimization: Adam updates, clone/split/prune maintenance, and the
coarse-to-fine pyramid mapping loop."""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from . import rasterizer
from .compressor import resize_bilinear
from .losses import total_loss
from .scene import (FrameBundle, GaussianMap, LossConfig, PyramidSchedule,
                    sigmoid, split_gaussian)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

DEFAULT_LEARNING_RATES = {
    "positions": 1.6e-4,     # scaled by scene extent at step time
    "log_scales": 5e-3,
    "rotations": 1e-3,
    "opacity_logits": 0.05,
    "colors": 2.5e-3,
    "semantics": 2.5e-3,     # shares the color rate
}


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_scale_fraction: float = 0.01   # split (vs clone) above this * scene extent
    max_scale_fraction: float = 0.5      # prune pathological splats above this
    interval: int = 100


def adam_step(gmap: GaussianMap, grads, learning_rates=None, step_index=1):
    """One bias-corrected Adam update over every parameter group.

    grads: mapping of parameter name -> gradient array (RenderGradients works
    via vars()). Splats with any non-finite gradient are skipped; returns the
    number skipped. Quaternions are renormalized afterwards.
    """
    lrs = dict(DEFAULT_LEARNING_RATES)
    if learning_rates:
        lrs.update(learning_rates)
    if hasattr(grads, "__dataclass_fields__"):
        grads = vars(grads)

    bad = np.zeros(len(gmap), dtype=bool)
    for name in gmap.PARAM_NAMES:
        g = np.asarray(grads[name])
        finite = np.isfinite(g)
        bad |= ~(finite if g.ndim == 1 else finite.all(axis=1))
    skipped = int(np.count_nonzero(bad))
    ok = ~bad

    t = max(int(step_index), 1)
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    extent = gmap.scene_extent()
    for name in gmap.PARAM_NAMES:
        g = np.nan_to_num(np.asarray(grads[name], dtype=np.float64))
        m = gmap.adam_m[name]
        v = gmap.adam_v[name]
        m[ok] = ADAM_BETA1 * m[ok] + (1 - ADAM_BETA1) * g[ok]
        v[ok] = ADAM_BETA2 * v[ok] + (1 - ADAM_BETA2) * g[ok] ** 2
        lr = lrs[name] * (extent if name == "positions" else 1.0)
        step = lr * (m[ok] / bc1) / (np.sqrt(v[ok] / bc2) + ADAM_EPS)
        arr = getattr(gmap, name)
        arr[ok] -= step
    gmap.normalize_rotations()
    return skipped


def accumulate_densify_stats(gmap: GaussianMap, grads):
    """Fold one backward pass into the running densification statistics."""
    vis = grads.visible
    gmap.grad2d_accum[vis] += grads.mean2d_norm[vis]
    gmap.obs_count[vis] += 1


def densify_and_prune(gmap: GaussianMap, cfg: DensifyConfig, rng):
    """Clone small / split large high-gradient splats, prune transparent or
    pathological ones, reset the statistics. Split children copy the parent
    semantic vector exactly."""
    n = len(gmap)
    if n == 0:
        return gmap
    extent = gmap.scene_extent()
    mean_grad = gmap.grad2d_accum / np.maximum(gmap.obs_count, 1)
    hot = (mean_grad > cfg.grad_threshold) & (gmap.obs_count > 0)
    max_scale = np.exp(gmap.log_scales).max(axis=1)
    big = max_scale > cfg.split_scale_fraction * extent
    split_mask = hot & big
    clone_mask = hot & ~big

    new = {name: [] for name in gmap.PARAM_NAMES}
    for i in np.flatnonzero(clone_mask):
        g = gmap.get_gaussian(i)
        new["positions"].append(g.position)
        new["log_scales"].append(g.log_scale)
        new["rotations"].append(g.rotation)
        new["opacity_logits"].append(g.opacity_logit)
        new["colors"].append(g.color)
        new["semantics"].append(g.semantic)
    for i in np.flatnonzero(split_mask):
        for child in split_gaussian(gmap.get_gaussian(i), rng):
            new["positions"].append(child.position)
            new["log_scales"].append(child.log_scale)
            new["rotations"].append(child.rotation)
            new["opacity_logits"].append(child.opacity_logit)
            new["colors"].append(child.color)
            new["semantics"].append(child.semantic)

    keep = ~split_mask  # split parents are replaced by their two children
    keep &= sigmoid(gmap.opacity_logits) >= cfg.prune_opacity
    keep &= max_scale <= cfg.max_scale_fraction * extent
    gmap.keep(keep)
    if new["positions"]:
        gmap.append(np.array(new["positions"]), np.array(new["log_scales"]),
                    np.array(new["rotations"]), np.array(new["opacity_logits"]),
                    np.array(new["colors"]), np.array(new["semantics"]))
    gmap.reset_densify_stats()
    return gmap


_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def pyramid_downscale_image(img, times=1):
    """Repeated 5-tap binomial blur + factor-2 decimation; output dims are
    ceil(side/2) per application."""
    img = np.asarray(img, dtype=np.float64)
    for _ in range(times):
        blurred = convolve1d(img, _BINOMIAL5, axis=0, mode="reflect")
        blurred = convolve1d(blurred, _BINOMIAL5, axis=1, mode="reflect")
        img = blurred[::2, ::2]
    return img


def pyramid_downscale_depth(depth, times=1):
    """Depth is decimated without blurring so invalid (zero) pixels never
    bleed into valid ones."""
    depth = np.asarray(depth, dtype=np.float64)
    for _ in range(times):
        depth = depth[::2, ::2]
    return depth


def _level_frame(frame: FrameBundle, level, cam):
    """Frame inputs downscaled for a pyramid level (level 0 = native)."""
    if level == 0:
        rgb, depth = frame.rgb, frame.depth
        lcam = cam
    else:
        rgb = pyramid_downscale_image(frame.rgb, level)
        depth = pyramid_downscale_depth(frame.depth, level)
        lcam = cam.scaled(2 ** level)
    feature = None
    if frame.feature is not None:
        feature = resize_bilinear(frame.feature, lcam.height, lcam.width)
    return FrameBundle(rgb=rgb, depth=depth, feature=feature,
                       timestamp=frame.timestamp), lcam


def optimize_window(gmap: GaussianMap, keyframes, schedule: PyramidSchedule,
                    loss_cfg: LossConfig, cam, learning_rates=None,
                    densify_cfg: DensifyConfig | None = None, rng=None,
                    background=None, step_offset=0, pose_lr=0.0,
                    fixed_pose_indices=(0,)):
    """Coarse-to-fine optimization over a window of (FrameBundle, Pose)
    keyframes. Every other iteration renders the newest keyframe (its freshly
    seeded splats need most of the fitting budget); the rest cycle over the
    older ones to prevent forgetting. Steps Adam per iteration and densifies
    every densify_cfg.interval iterations. Returns the LossBreakdown
    history.

    With pose_lr > 0 keyframe poses are jointly refined (Adam on the se(3)
    tangent from the rasterizer's pose gradient). Keyframes listed in
    fixed_pose_indices stay put to pin the gauge; refined poses are written
    back into the keyframes list as replacement (frame, pose) tuples."""
    if not keyframes:
        raise ValueError("optimize_window needs at least one keyframe")
    schedule.validate()
    rng = rng or np.random.default_rng(0)
    history = []
    it = step_offset
    poses = [p for _, p in keyframes]
    pose_m = np.zeros((len(keyframes), 6))
    pose_v = np.zeros((len(keyframes), 6))
    pose_t = np.zeros(len(keyframes), dtype=int)
    for li, level in enumerate(range(schedule.levels - 1, -1, -1)):
        lv_frames = [_level_frame(f, level, cam) for f, _ in keyframes]
        for j in range(schedule.iterations_per_level[li]):
            if len(keyframes) == 1 or j % 2 == 0:
                kf = len(keyframes) - 1
            else:
                kf = (j // 2) % (len(keyframes) - 1)
            frame, lcam = lv_frames[kf]
            pose = poses[kf]
            out = rasterizer.render(gmap, pose, lcam, background)
            breakdown, upstream = total_loss(out, frame, loss_cfg)
            grads = rasterizer.render_backward(gmap, pose, lcam, background,
                                               upstream["d_rgb"], upstream["d_feature"],
                                               upstream["d_depth"], upstream["d_alpha"])
            accumulate_densify_stats(gmap, grads)
            it += 1
            adam_step(gmap, grads, learning_rates, step_index=it)
            if pose_lr > 0.0 and kf not in fixed_pose_indices \
                    and np.all(np.isfinite(grads.pose)):
                g = grads.pose
                pose_m[kf] = ADAM_BETA1 * pose_m[kf] + (1 - ADAM_BETA1) * g
                pose_v[kf] = ADAM_BETA2 * pose_v[kf] + (1 - ADAM_BETA2) * g * g
                pose_t[kf] += 1
                mh = pose_m[kf] / (1 - ADAM_BETA1 ** pose_t[kf])
                vh = pose_v[kf] / (1 - ADAM_BETA2 ** pose_t[kf])
                xi = -pose_lr * mh / (np.sqrt(vh) + 1e-8)
                poses[kf] = rasterizer.perturb_pose(poses[kf], xi)
                keyframes[kf] = (keyframes[kf][0], poses[kf])
            history.append(breakdown)
            if densify_cfg is not None and it % densify_cfg.interval == 0:
                densify_and_prune(gmap, densify_cfg, rng)
    return history
