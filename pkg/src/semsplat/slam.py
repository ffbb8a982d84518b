"""Online loop: per-frame pose tracking against the current map, keyframe
selection, map growth from back-projected depth, and windowed mapping."""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rasterizer
from .compressor import PCAModel, compress_grid, resize_bilinear
from .losses import loss_color, loss_depth
from .optim import DensifyConfig, optimize_window, pyramid_downscale_depth, \
    pyramid_downscale_image
from .scene import (CameraIntrinsics, FrameBundle, GaussianMap, LossConfig,
                    Pose, PyramidSchedule, logit)

log = logging.getLogger(__name__)

STAGE_NAMES = ("Image preprocessing", "Feature extraction",
               "Feature compression", "Tracking + Mapping")


class SlamError(RuntimeError):
    pass


@dataclass
class SlamConfig:
    tracking_iterations: int = 12
    mapping_iterations: int = 100          # split across the pyramid schedule
    keyframe_translation: float = 0.3      # meters
    keyframe_rotation: float = 20.0        # degrees
    keyframe_coverage: float = 0.8         # rendered-alpha fraction
    window_size: int = 8
    schedule: PyramidSchedule = field(default_factory=PyramidSchedule)
    loss: LossConfig = field(default_factory=LossConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    seed_stride: int = 4
    seed_alpha_max: float = 0.5
    tracking_downscale: int = 0            # pyramid levels applied before tracking
    tracking_gn_iterations: int = 6        # trimmed pull-in pass
    tracking_gn_full_iterations: int = 12  # lightly-trimmed polish
    tracking_polish_trim: float = 0.1
    tracking_step: float = 1e-2
    tracking_alpha_mask: float = 0.5       # coverage threshold for the tracking loss
    tracking_trim_fraction: float = 0.4    # worst-pixel fraction dropped per term
    # kept light: rendered depth at novel views is noisy near silhouettes and
    # oblique surfaces (splats contribute their center depth), so a heavy
    # depth term biases the pose minimum by several millimeters
    tracking_depth_weight: float = 0.02
    max_skip_fraction: float = 0.10
    # Optional re-alignment of window keyframes after each mapping pass.
    # Off by default: once a keyframe has seeded geometry at its pose the
    # map is self-consistent with that pose, and re-tracking against it
    # cannot recover the error (it tends to drift further instead).
    refine_keyframes: bool = False
    refine_window: int = 4                 # newest keyframes re-aligned per pass
    refine_gn_iterations: int = 4
    refine_gn_full_iterations: int = 2

    def validate(self):
        if self.tracking_iterations < 1 or self.mapping_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.window_size < 1:
            raise ValueError("window size must be >= 1")


@dataclass
class TrackReport:
    residual: float
    initial_residual: float
    iterations: int
    converged: bool
    empty_map: bool = False
    diverged: bool = False


def _tracking_terms(out, rgb, depth, cfg: SlamConfig):
    """Masked, trimmed residual terms shared by the tracking objective and
    the Gauss-Newton step. Pixels the map does not yet explain (rendered
    alpha below threshold) are excluded, and the worst fraction of the
    remainder is trimmed away: occlusion edges and local map defects
    otherwise swamp the pose signal. Returns (rgb diff, rgb keep-mask,
    expected-depth diff, depth keep-mask)."""
    mask = out.alpha >= cfg.tracking_alpha_mask
    keep = 1.0 - cfg.tracking_trim_fraction

    diff = out.rgb - rgb
    perpix = np.abs(diff).mean(axis=2)
    cvals = perpix[mask]
    if cvals.size and keep < 1.0:
        cmask = mask & (perpix <= np.quantile(cvals, keep))
    else:
        cmask = mask

    # expected depth given a hit: undoes the bias of translucent splats
    a = np.maximum(out.alpha, 1e-3)
    ddiff = out.depth / a - depth
    dvalid = mask & (depth > 0)
    derr = np.abs(ddiff)
    dvals = derr[dvalid]
    if dvals.size and keep < 1.0:
        dmask = dvalid & (derr <= np.quantile(dvals, keep))
    else:
        dmask = dvalid
    return diff, cmask, ddiff, dmask


def _tracking_residual(gmap, pose, cam, rgb, depth, cfg: SlamConfig):
    """Robust coverage-masked L1 tracking objective, plus its upstream
    image-space gradients for the plain gradient-descent path."""
    out = rasterizer.render(gmap, pose, cam)
    diff, cmask, ddiff, dmask = _tracking_terms(out, rgb, depth, cfg)

    nc = max(int(np.count_nonzero(cmask)), 1)
    lc = float(np.abs(diff).mean(axis=2)[cmask].sum() / nc)
    g_rgb = np.where(cmask[..., None], np.sign(diff), 0.0) / (3 * nc)

    nd = max(int(np.count_nonzero(dmask)), 1)
    ld = float(np.abs(ddiff)[dmask].sum() / nd)
    a = np.maximum(out.alpha, 1e-3)
    g_depth = np.where(dmask, np.sign(ddiff), 0.0) / (nd * a)

    w = cfg.tracking_depth_weight
    return lc + w * ld, g_rgb, w * g_depth


def _track_at_level(gmap, pose, tcam, rgb, depth, cfg: SlamConfig, iters):
    """Gradient descent with backtracking line search at one pyramid level.
    Returns (pose, residual, iterations_used, stalled)."""
    res, g_rgb, g_depth = _tracking_residual(gmap, pose, tcam, rgb, depth, cfg)
    best_pose, best = pose, res
    step = cfg.tracking_step
    fail_streak = 0
    used = 0
    for it in range(iters):
        used = it + 1
        grads = rasterizer.render_backward(gmap, pose, tcam, None,
                                           g_rgb, None, g_depth, None)
        g = grads.pose
        gn = np.linalg.norm(g)
        if gn < 1e-14:
            break
        direction = -g / gn
        accepted = False
        t = step
        for _ in range(10):
            cand = rasterizer.perturb_pose(pose, t * direction)
            cres, c_rgb, c_depth = _tracking_residual(gmap, cand, tcam, rgb, depth, cfg)
            if cres < res:
                pose, res, g_rgb, g_depth = cand, cres, c_rgb, c_depth
                step = min(t * 1.5, 0.25)
                accepted = True
                break
            t *= 0.5
        if not accepted:
            fail_streak += 1
            step *= 0.5
            if fail_streak >= 3:
                break
        else:
            fail_streak = 0
        if res < best:
            if best - res < 1e-3 * best:  # diminishing returns at this level
                best, best_pose = res, pose
                break
            best, best_pose = res, pose
    return best_pose, best, used, fail_streak >= 3


def _track_gn_at_level(gmap, pose, tcam, rgb, depth, cfg: SlamConfig, iters):
    """IRLS Gauss-Newton: finite-difference image Jacobians, per-pixel
    weights 1/max(|r|, eps) approximating the L1 objective, gradient and
    normal matrix assembled from the same weighted residuals so the solve is
    an exact weighted-least-squares step, Levenberg-Marquardt damping as the
    backtracking rule. Plain gradient descent stalls millimeters from the
    optimum because rotation rows of the pose gradient are ~depth^2 larger
    than translation rows; the normal matrix captures that coupling."""
    res, _, _ = _tracking_residual(gmap, pose, tcam, rgb, depth, cfg)
    # eps floors the IRLS weight 1/|r|; too small and well-fit pixels get
    # enormous curvature, freezing the step length near the optimum
    h, eps = 1e-4, 1e-1
    lam = 1e-4
    used = 0
    jr = jd = None
    accepted = True
    for it in range(iters):
        used = it + 1
        out = rasterizer.render(gmap, pose, tcam)
        if jr is None or it % 3 == 0:
            j_rgb = np.zeros((6,) + out.rgb.shape)
            j_depth = np.zeros((6,) + out.depth.shape)
            e0 = out.depth / np.maximum(out.alpha, 1e-3)
            for k in range(6):
                e = np.zeros(6)
                e[k] = h
                op = rasterizer.render(gmap, rasterizer.perturb_pose(pose, e), tcam)
                j_rgb[k] = (op.rgb - out.rgb) / h
                j_depth[k] = (op.depth / np.maximum(op.alpha, 1e-3) - e0) / h
            jr = j_rgb.reshape(6, -1)
            jd = j_depth.reshape(6, -1)
        diff, cmask, ddiff, dmask = _tracking_terms(out, rgb, depth, cfg)
        nc = max(int(np.count_nonzero(cmask)), 1)
        w_rgb = np.where(cmask[..., None], 1.0 / np.maximum(np.abs(diff), eps),
                         0.0) / (3 * nc)
        nd = max(int(np.count_nonzero(dmask)), 1)
        w_depth = np.where(dmask, 1.0 / np.maximum(np.abs(ddiff), eps), 0.0)
        w_depth *= cfg.tracking_depth_weight / nd
        wr = (w_rgb * diff).ravel()
        wd = (w_depth * ddiff).ravel()
        g = jr @ wr + jd @ wd
        H = (jr * w_rgb.ravel()) @ jr.T + (jd * w_depth.ravel()) @ jd.T
        accepted = False
        for _ in range(10):
            d = np.linalg.solve(H + lam * np.diag(np.diag(H)) + 1e-12 * np.eye(6), -g)
            cand = rasterizer.perturb_pose(pose, d)
            cres, c_rgb, c_depth = _tracking_residual(gmap, cand, tcam, rgb, depth, cfg)
            if cres < res:
                pose, res, g_rgb, g_depth = cand, cres, c_rgb, c_depth
                lam = max(lam * 0.3, 1e-6)
                accepted = True
                break
            lam *= 5.0
            H = None if lam > 1e2 else H  # stale jacobian: force a refresh
            if H is None:
                break
        if not accepted and H is not None:
            break
        if accepted and (res < 1e-12 or np.linalg.norm(d) < 1e-8):
            break
    return pose, res, used, not accepted


def track(gmap: GaussianMap, frame: FrameBundle, init: Pose, cam: CameraIntrinsics,
          cfg: SlamConfig):
    """Dense photometric + depth alignment over an se(3) perturbation.
    The curvature-preconditioned pass runs at the downscaled level first
    (most of the convergence for a quarter of the pixels) and a short
    full-resolution polish removes the few-millimeter bias of the blurred
    pyramid target. The semantic term is excluded from tracking."""
    if len(gmap) == 0:
        return init, TrackReport(residual=float("inf"), initial_residual=float("inf"),
                                 iterations=0, converged=False, empty_map=True)
    # degenerate input: no texture and no valid depth leaves the pose unobservable
    if float(np.std(frame.rgb)) < 1e-9 and not np.any(frame.depth > 0):
        return init, TrackReport(residual=float("inf"), initial_residual=float("inf"),
                                 iterations=0, converged=False, diverged=True)

    # measured with the final (polish) objective so the revert check below
    # compares like with like
    pcfg = replace(cfg, tracking_trim_fraction=cfg.tracking_polish_trim)
    initial, _, _ = _tracking_residual(gmap, init, cam, frame.rgb, frame.depth,
                                       pcfg)
    pose = init
    total_iters = 0
    stalled_everywhere = True
    for lvl in range(cfg.tracking_downscale, -1, -1):
        if lvl > 0:
            rgb = pyramid_downscale_image(frame.rgb, lvl)
            depth = pyramid_downscale_depth(frame.depth, lvl)
            tcam = cam.scaled(2 ** lvl)
        else:
            rgb, depth, tcam = frame.rgb, frame.depth, cam
        if lvl == 0:
            # heavily-trimmed pull-in stage, then a lightly-trimmed polish:
            # trim 0.4 tolerates bad inits but its kept-set reshuffle caps
            # accuracy, while a light trim still rejects the silhouette
            # pixels that displace the untrimmed minimum on imperfect maps
            pose, res, used, stalled = _track_gn_at_level(
                gmap, pose, tcam, rgb, depth, cfg, cfg.tracking_gn_iterations)
            total_iters += used
            lcfg = replace(cfg, tracking_trim_fraction=cfg.tracking_polish_trim)
            pose, res, used, stalled = _track_gn_at_level(
                gmap, pose, tcam, rgb, depth, lcfg,
                cfg.tracking_gn_full_iterations)
        else:
            pose, res, used, stalled = _track_gn_at_level(
                gmap, pose, tcam, rgb, depth, cfg, cfg.tracking_gn_iterations)
        total_iters += used
        stalled_everywhere = stalled_everywhere and stalled
    if res > initial:  # the fine level never improved on the init
        if stalled_everywhere:
            return init, TrackReport(residual=initial, initial_residual=initial,
                                     iterations=total_iters, converged=False,
                                     diverged=True)
        pose, res = init, initial
    return pose, TrackReport(residual=res, initial_residual=initial,
                             iterations=total_iters, converged=True)


def alpha_coverage(gmap, pose, cam):
    if len(gmap) == 0:
        return 0.0
    out = rasterizer.render(gmap, pose, cam)
    return float(np.mean(out.alpha > 0.5))


def select_keyframe(pose: Pose, frame: FrameBundle, last_keyframe_pose: Pose,
                    gmap: GaussianMap, cam: CameraIntrinsics, cfg: SlamConfig):
    """Keyframe when motion since the last keyframe exceeds the translation or
    rotation threshold, or rendered alpha coverage drops below the floor."""
    from .geometry import quat_to_rot, rotation_angle_deg
    dt = np.linalg.norm(pose.translation - last_keyframe_pose.translation)
    if dt > cfg.keyframe_translation:
        return True
    dR = quat_to_rot(pose.rotation).T @ quat_to_rot(last_keyframe_pose.rotation)
    if rotation_angle_deg(dR) > cfg.keyframe_rotation:
        return True
    if alpha_coverage(gmap, pose, cam) < cfg.keyframe_coverage:
        return True
    return False


def seed_gaussians(gmap: GaussianMap, frame: FrameBundle, pose: Pose,
                   cam: CameraIntrinsics, cfg: SlamConfig):
    """Back-project under-covered valid-depth pixels (on a stride grid) into
    new splats: color from RGB, scale from the projected pixel footprint,
    opacity 0.5, semantic vector zero."""
    stride = cfg.seed_stride
    if len(gmap) > 0:
        alpha = rasterizer.render(gmap, pose, cam).alpha
    else:
        alpha = np.zeros((cam.height, cam.width))
    ys, xs = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
    ys, xs = ys.ravel(), xs.ravel()
    z = frame.depth[ys, xs]
    mask = (z > 0) & (alpha[ys, xs] < cfg.seed_alpha_max)
    n_new = int(np.count_nonzero(mask))
    if n_new == 0:
        return 0
    ys, xs, z = ys[mask], xs[mask], z[mask]
    pc = np.stack([(xs + 0.5 - cam.cx) / cam.fx * z,
                   (ys + 0.5 - cam.cy) / cam.fy * z, z], axis=1)
    R = pose.matrix()[:3, :3]
    pw = pc @ R.T + pose.translation
    scale = 0.5 * z / cam.fx * stride
    # surfel-style: thin along the viewing direction so rendered depth stays
    # crisp; local z maps to the camera forward axis via the camera rotation
    scales = np.stack([scale, scale, 0.25 * scale], axis=1)
    gmap.append(
        pw,
        np.log(scales),
        np.tile(pose.rotation, (n_new, 1)),
        np.full(n_new, logit(0.5)),
        frame.rgb[ys, xs],
        np.zeros((n_new, gmap.feature_dim)),
    )
    return n_new


@dataclass
class SlamResult:
    trajectory: list                 # (timestamp, Pose)
    gmap: GaussianMap
    timing_ms: dict                  # stage name -> mean ms per frame
    frame_log: list
    skipped: int = 0


def run_sequence(manifest, frames, cfg: SlamConfig, pca: PCAModel | None = None,
                 feature_dim=None, gt_first_pose: Pose | None = None,
                 gt_poses=None, seed=0) -> SlamResult:
    """Run tracking + mapping over an ordered frame iterable.

    frames: iterable of (index, FrameBundle|None). Features arriving raw
    (768-dim) are compressed through `pca`. When gt_poses is given, tracking
    is bypassed (mapping-only mode). The first pose anchors to gt_first_pose
    or identity.
    """
    cfg.validate()
    cam = manifest.intrinsics
    rng = np.random.default_rng(seed)
    timings = {name: [] for name in STAGE_NAMES}

    if feature_dim is None:
        feature_dim = pca.k if pca is not None else 0
    gmap = GaussianMap(feature_dim)
    trajectory = []
    keyframes = []   # [FrameBundle with compressed features, Pose, trajectory idx]
    frame_log = []
    skipped = 0
    total = 0
    last_kf_pose = None
    prev_pose = prev_prev = None
    step_count = 0

    for idx, frame in frames:
        total += 1
        if frame is None:
            skipped += 1
            log.warning("frame %d skipped", idx)
            continue
        t0 = time.perf_counter()
        frame.validate()
        t1 = time.perf_counter()
        # feature files are read upstream; this stage covers the handoff
        t2 = time.perf_counter()
        if frame.feature is not None and pca is not None and \
                frame.feature.shape[2] == pca.dim:
            frame.feature = compress_grid(pca, frame.feature)
        t3 = time.perf_counter()

        if gt_poses is not None:
            pose = gt_poses[idx]
            report = None
        elif not trajectory:
            pose = gt_first_pose if gt_first_pose is not None else Pose.identity()
            report = None
        else:
            # constant-velocity initialization
            if prev_prev is not None:
                T_prev = prev_pose.matrix()
                delta = T_prev @ np.linalg.inv(prev_prev.matrix())
                T_init = delta @ T_prev
                from .geometry import rot_to_quat
                init = Pose(rot_to_quat(T_init[:3, :3]), T_init[:3, 3])
            else:
                init = prev_pose
            pose, report = track(gmap, frame, init, cam, cfg)

        is_kf = last_kf_pose is None or select_keyframe(pose, frame, last_kf_pose,
                                                        gmap, cam, cfg)
        if is_kf:
            seed_gaussians(gmap, frame, pose, cam, cfg)
            keyframes.append([frame, pose, len(trajectory)])
            keyframes = keyframes[-cfg.window_size:]
            history = optimize_window(gmap, [(f, p) for f, p, _ in keyframes],
                                      cfg.schedule, cfg.loss, cam,
                                      densify_cfg=cfg.densify, rng=rng,
                                      step_offset=step_count)
            step_count += len(history)
            if cfg.refine_keyframes and gt_poses is None:
                rcfg = replace(cfg,
                               tracking_gn_iterations=cfg.refine_gn_iterations,
                               tracking_gn_full_iterations=cfg.refine_gn_full_iterations)
                for entry in keyframes[-cfg.refine_window:]:
                    if entry[2] == 0:
                        continue  # the first pose anchors the gauge
                    npose, rep = track(gmap, entry[0], entry[1], cam, rcfg)
                    if rep.converged:
                        entry[1] = npose
                        if entry[2] < len(trajectory):
                            ts_old = trajectory[entry[2]][0]
                            trajectory[entry[2]] = (ts_old, npose)
                pose = keyframes[-1][1]
            last_kf_pose = keyframes[-1][1]
        t4 = time.perf_counter()

        trajectory.append((frame.timestamp, pose))
        prev_prev, prev_pose = prev_pose, pose
        timings["Image preprocessing"].append((t1 - t0) * 1e3)
        timings["Feature extraction"].append((t2 - t1) * 1e3)
        timings["Feature compression"].append((t3 - t2) * 1e3)
        timings["Tracking + Mapping"].append((t4 - t3) * 1e3)
        frame_log.append({
            "frame": idx,
            "residual": report.residual if report else 0.0,
            "splats": len(gmap),
            "keyframe": bool(is_kf),
            "stage_ms": {name: timings[name][-1] for name in STAGE_NAMES},
        })
        log.info("frame %d residual=%.5f splats=%d kf=%s", idx,
                 frame_log[-1]["residual"], len(gmap), is_kf)

    if total and skipped / total > cfg.max_skip_fraction:
        raise SlamError(f"{skipped}/{total} frames skipped (> "
                        f"{cfg.max_skip_fraction:.0%})")
    timing_ms = {name: (float(np.mean(v)) if v else 0.0)
                 for name, v in timings.items()}
    return SlamResult(trajectory=trajectory, gmap=gmap, timing_ms=timing_ms,
                      frame_log=frame_log, skipped=skipped)


def timing_table(timing_ms):
    width = max(len(n) for n in STAGE_NAMES)
    lines = [f"{'Processing Stage'.ljust(width)} | ms/frame"]
    lines.append("-" * (width + 11))
    for name in STAGE_NAMES:
        lines.append(f"{name.ljust(width)} | {timing_ms.get(name, 0.0):8.2f}")
    lines.append("-" * (width + 11))
    lines.append(f"{'Average processing time'.ljust(width)} | "
                 f"{sum(timing_ms.values()):8.2f}")
    return "\n".join(lines)
