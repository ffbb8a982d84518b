"""Differentiable splat rasterizer.

Forward: EWA projection of 3D Gaussians to 2D, global depth sort,
front-to-back alpha compositing of color, K-dim semantic feature, expected
depth and accumulated alpha, tiled (16x16) with early termination.

Backward: analytic gradients for every splat parameter and a 6-dof camera
perturbation, validated against central finite differences.

reference_render is a deliberately naive per-pixel oracle sharing only the
projection front-end with the tiled path.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import (quat_to_rot_backward, quat_to_rot_batch, rot_to_quat,
                       se3_exp)
from .scene import CameraIntrinsics, GaussianMap, Pose, activate

NEAR_PLANE = 0.01
LOWPASS_FLOOR = 0.3          # px^2 added to the diagonal of every cov2d
ALPHA_CLAMP = 0.99
# Compositing stops once transmittance drops below this. The tiled and
# reference paths share the constant, so truncation never breaks their
# equivalence.
TRANSMITTANCE_STOP = 1e-5
# Gaussians are evaluated out to 3 sigma; a smoothstep window ramps the tail
# to exactly zero over [CUTOFF_RAMP_SQ, CUTOFF_MAHAL_SQ] so the image is C1
# in every parameter (a hard cutoff makes finite differencing ill-posed).
CUTOFF_MAHAL_SQ = 9.0
CUTOFF_RAMP_SQ = 7.0
TILE = 16


def _gaussian_windowed(maha):
    """exp(-maha/2) faded to zero at the cutoff, and its d/dmaha."""
    s = np.clip((maha - CUTOFF_RAMP_SQ) / (CUTOFF_MAHAL_SQ - CUTOFF_RAMP_SQ), 0.0, 1.0)
    win = 1.0 - s * s * (3.0 - 2.0 * s)
    dwin = -6.0 * s * (1.0 - s) / (CUTOFF_MAHAL_SQ - CUTOFF_RAMP_SQ)
    e = np.exp(-0.5 * np.minimum(maha, 80.0))
    return e * win, e * (dwin - 0.5 * win)


class RenderConfigError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


@dataclass
class Projected2D:
    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2,2) SPD, pixels^2, includes low-pass floor
    view_depth: float       # meters
    radius: float           # 3-sigma cutoff radius, pixels


@dataclass
class RenderOutput:
    rgb: np.ndarray       # H x W x 3
    feature: np.ndarray   # H x W x K
    depth: np.ndarray     # H x W
    alpha: np.ndarray     # H x W


@dataclass
class _Projection:
    """Vectorized projection of all retained splats, sorted front-to-back."""
    idx: np.ndarray        # indices into the map, sorted by view depth
    mean2d: np.ndarray     # (M,2)
    conic: np.ndarray      # (M,2,2) inverse cov2d
    cov2d: np.ndarray      # (M,2,2)
    z: np.ndarray          # (M,)
    radius: np.ndarray     # (M,) 3-sigma
    opacity: np.ndarray    # (M,)
    color: np.ndarray      # (M,3)
    semantic: np.ndarray   # (M,K)
    pc: np.ndarray         # (M,3) camera-frame positions
    cov_cam: np.ndarray    # (M,3,3) camera-frame 3D covariance
    J: np.ndarray          # (M,2,3) projection Jacobians


def _project_all(gmap: GaussianMap, pose: Pose, cam: CameraIntrinsics):
    cam.validate()
    n = len(gmap)
    if n == 0:
        return None
    W, t = pose.world_to_camera()
    pc = gmap.positions @ W.T + t
    z = pc[:, 2]
    keep = z > NEAR_PLANE
    if not np.any(keep):
        return None

    scales, opac, cov3d, _ = gmap.activated()
    cov_cam = np.einsum('ij,njk,lk->nil', W, cov3d, W)

    x, y = pc[:, 0], pc[:, 1]
    zs = np.where(keep, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * x / zs ** 2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * y / zs ** 2

    cov2d = np.einsum('nij,njk,nlk->nil', J, cov_cam, J)
    cov2d[:, 0, 0] += LOWPASS_FLOOR
    cov2d[:, 1, 1] += LOWPASS_FLOOR

    # largest eigenvalue of the 2x2 -> 3-sigma radius
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(mid ** 2 - (cov2d[:, 0, 0] * cov2d[:, 1, 1]
                                          - cov2d[:, 0, 1] ** 2), 0.0))
    lam_max = mid + disc
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)

    # cull when the 3-sigma ellipse misses the image entirely
    keep &= (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < cam.width)
    keep &= (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < cam.height)
    # guard band: drop splats whose center projects far outside the image;
    # their EWA footprint is numerically unbounded near the camera plane
    keep &= (mean2d[:, 0] > -0.3 * cam.width) & (mean2d[:, 0] < 1.3 * cam.width)
    keep &= (mean2d[:, 1] > -0.3 * cam.height) & (mean2d[:, 1] < 1.3 * cam.height)
    if not np.any(keep):
        return None

    idx = np.flatnonzero(keep)
    order = np.argsort(z[idx], kind='stable')
    idx = idx[order]

    det = (cov2d[idx, 0, 0] * cov2d[idx, 1, 1] - cov2d[idx, 0, 1] ** 2)
    conic = np.empty((idx.size, 2, 2))
    conic[:, 0, 0] = cov2d[idx, 1, 1] / det
    conic[:, 1, 1] = cov2d[idx, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[idx, 0, 1] / det

    return _Projection(
        idx=idx, mean2d=mean2d[idx], conic=conic, cov2d=cov2d[idx],
        z=z[idx], radius=radius[idx], opacity=opac[idx],
        color=gmap.colors[idx], semantic=gmap.semantics[idx],
        pc=pc[idx], cov_cam=cov_cam[idx], J=J[idx],
    )


def project(g, pose: Pose, cam: CameraIntrinsics, index=None):
    """Project a single Gaussian3D; returns Projected2D or None when culled."""
    act = activate(g, index)
    tmp = GaussianMap(g.semantic.shape[0])
    tmp.append(g.position, g.log_scale, g.rotation, g.opacity_logit, g.color, g.semantic)
    proj = _project_all(tmp, pose, cam)
    if proj is None:
        return None
    return Projected2D(mean2d=proj.mean2d[0], cov2d=proj.cov2d[0],
                       view_depth=float(proj.z[0]), radius=float(proj.radius[0]))


def _tile_ranges(proj, cam, margin=1.0):
    """Inclusive tile index ranges per splat; the 3-sigma binning radius
    matches the 3-sigma evaluation cutoff, so binning never drops mass."""
    r = proj.radius * margin
    tx0 = np.clip(((proj.mean2d[:, 0] - r) // TILE).astype(int), 0, None)
    tx1 = np.clip(((proj.mean2d[:, 0] + r) // TILE).astype(int), None,
                  (cam.width - 1) // TILE)
    ty0 = np.clip(((proj.mean2d[:, 1] - r) // TILE).astype(int), 0, None)
    ty1 = np.clip(((proj.mean2d[:, 1] + r) // TILE).astype(int), None,
                  (cam.height - 1) // TILE)
    return tx0, tx1, ty0, ty1


@njit(cache=True)
def _build_tile_lists(tx0, tx1, ty0, ty1, ntx, nty):
    """CSR tile lists: tile t covers flat[start[t]:start[t+1]], splat indices
    in global front-to-back order."""
    m = tx0.size
    counts = np.zeros(ntx * nty + 1, np.int64)
    for s in range(m):
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                counts[ty * ntx + tx + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    flat = np.empty(start[-1], np.int64)
    for s in range(m):
        for ty in range(ty0[s], ty1[s] + 1):
            for tx in range(tx0[s], tx1[s] + 1):
                t = ty * ntx + tx
                flat[fill[t]] = s
                fill[t] += 1
    return start, flat


def _tile_lists(proj, cam):
    ntx = (cam.width + TILE - 1) // TILE
    nty = (cam.height + TILE - 1) // TILE
    tx0, tx1, ty0, ty1 = _tile_ranges(proj, cam)
    start, flat = _build_tile_lists(tx0, tx1, ty0, ty1, ntx, nty)
    return start, flat, ntx, nty


@njit(cache=True)
def _forward_tiles(start, flat, ntx, nty, height, width,
                   mean2d, conic, opacity, z, color, sem, bg,
                   rgb, feat, depth, alpha):
    """Front-to-back compositing per tile with per-pixel early termination.
    Weights follow the live-mask definition: a splat contributes only while
    the pixel's transmittance is still >= TRANSMITTANCE_STOP, so stopping
    early is exact, not an approximation."""
    k = sem.shape[1]
    ramp = CUTOFF_MAHAL_SQ - CUTOFF_RAMP_SQ
    for t in range(ntx * nty):
        s0, s1 = start[t], start[t + 1]
        if s0 == s1:
            continue
        x0 = (t % ntx) * TILE
        y0 = (t // ntx) * TILE
        for yy in range(y0, min(y0 + TILE, height)):
            py = yy + 0.5
            for xx in range(x0, min(x0 + TILE, width)):
                px = xx + 0.5
                T = 1.0
                acc = 0.0
                for si in range(s0, s1):
                    s = flat[si]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    maha = (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                            + conic[s, 2] * dy * dy)
                    if maha >= CUTOFF_MAHAL_SQ:
                        continue
                    g = np.exp(-0.5 * maha)
                    if maha > CUTOFF_RAMP_SQ:
                        u = (maha - CUTOFF_RAMP_SQ) / ramp
                        g *= 1.0 - u * u * (3.0 - 2.0 * u)
                    a = opacity[s] * g
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    w = a * T
                    acc += w
                    for c in range(3):
                        rgb[yy, xx, c] += w * color[s, c]
                    for c in range(k):
                        feat[yy, xx, c] += w * sem[s, c]
                    depth[yy, xx] += w * z[s]
                    T *= 1.0 - a
                    if T < TRANSMITTANCE_STOP:
                        break
                alpha[yy, xx] = acc
                for c in range(3):
                    rgb[yy, xx, c] += (1.0 - acc) * bg[c] - bg[c]


@njit(cache=True)
def _backward_tiles(start, flat, ntx, nty, height, width,
                    mean2d, conic, opacity, z, color, sem,
                    bg, d_rgb, d_feature, d_depth, d_alpha,
                    d_mean2d, d_conic, d_z, d_opac, d_color, d_sem):
    """Per-pixel backward pass mirroring _forward_tiles. Two sweeps per
    pixel: the first accumulates the total downstream weight mass (for the
    suffix term of d/d alpha_i) plus the suffix-free gradients, the second
    replays transmittance to distribute the alpha gradient."""
    k = sem.shape[1]
    ramp = CUTOFF_MAHAL_SQ - CUTOFF_RAMP_SQ
    for t in range(ntx * nty):
        s0, s1 = start[t], start[t + 1]
        if s0 == s1:
            continue
        x0 = (t % ntx) * TILE
        y0 = (t // ntx) * TILE
        for yy in range(y0, min(y0 + TILE, height)):
            py = yy + 0.5
            for xx in range(x0, min(x0 + TILE, width)):
                px = xx + 0.5
                ga = d_alpha[yy, xx]
                gd = d_depth[yy, xx]
                # pass 1: total of u_i = w_i g_i and suffix-free gradients
                total_u = 0.0
                T = 1.0
                for si in range(s0, s1):
                    s = flat[si]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    maha = (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                            + conic[s, 2] * dy * dy)
                    if maha >= CUTOFF_MAHAL_SQ:
                        continue
                    g = np.exp(-0.5 * maha)
                    if maha > CUTOFF_RAMP_SQ:
                        u = (maha - CUTOFF_RAMP_SQ) / ramp
                        g *= 1.0 - u * u * (3.0 - 2.0 * u)
                    a = opacity[s] * g
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    w = a * T
                    gval = z[s] * gd + ga
                    for c in range(3):
                        gval += (color[s, c] - bg[c]) * d_rgb[yy, xx, c]
                        d_color[s, c] += w * d_rgb[yy, xx, c]
                    for c in range(k):
                        gval += sem[s, c] * d_feature[yy, xx, c]
                        d_sem[s, c] += w * d_feature[yy, xx, c]
                    d_z[s] += w * gd
                    total_u += w * gval
                    T *= 1.0 - a
                    if T < TRANSMITTANCE_STOP:
                        break
                # pass 2: alpha gradient needs the suffix sum of u
                prefix = 0.0
                T = 1.0
                for si in range(s0, s1):
                    s = flat[si]
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    maha = (conic[s, 0] * dx * dx + 2.0 * conic[s, 1] * dx * dy
                            + conic[s, 2] * dy * dy)
                    if maha >= CUTOFF_MAHAL_SQ:
                        continue
                    g = np.exp(-0.5 * maha)
                    dwin = 0.0
                    win = 1.0
                    if maha > CUTOFF_RAMP_SQ:
                        u = (maha - CUTOFF_RAMP_SQ) / ramp
                        win = 1.0 - u * u * (3.0 - 2.0 * u)
                        dwin = -6.0 * u * (1.0 - u) / ramp
                    dg = g * (dwin - 0.5 * win)   # dG/dmaha
                    g *= win
                    a = opacity[s] * g
                    clamped = a > ALPHA_CLAMP
                    if clamped:
                        a = ALPHA_CLAMP
                    w = a * T
                    gval = z[s] * gd + ga
                    for c in range(3):
                        gval += (color[s, c] - bg[c]) * d_rgb[yy, xx, c]
                    for c in range(k):
                        gval += sem[s, c] * d_feature[yy, xx, c]
                    prefix += w * gval
                    if not clamped:
                        d_a = T * gval - (total_u - prefix) / (1.0 - a)
                        d_opac[s] += d_a * g
                        d_maha = d_a * opacity[s] * dg
                        adx = conic[s, 0] * dx + conic[s, 1] * dy
                        ady = conic[s, 1] * dx + conic[s, 2] * dy
                        d_mean2d[s, 0] += -2.0 * d_maha * adx
                        d_mean2d[s, 1] += -2.0 * d_maha * ady
                        d_conic[s, 0] += d_maha * dx * dx
                        d_conic[s, 1] += d_maha * dx * dy
                        d_conic[s, 2] += d_maha * dy * dy
                    T *= 1.0 - a
                    if T < TRANSMITTANCE_STOP:
                        break


def render(gmap: GaussianMap, pose: Pose, cam: CameraIntrinsics,
           background=None) -> RenderOutput:
    """Tiled forward rendering of RGB, feature, expected depth and alpha."""
    gmap.check_consistent()
    K = gmap.feature_dim
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width
    out = RenderOutput(rgb=np.tile(bg, (H, W, 1)), feature=np.zeros((H, W, K)),
                       depth=np.zeros((H, W)), alpha=np.zeros((H, W)))
    proj = _project_all(gmap, pose, cam)
    if proj is None:
        return out

    start, flat, ntx, nty = _tile_lists(proj, cam)
    _forward_tiles(start, flat, ntx, nty, H, W,
                   proj.mean2d, _pack_conic(proj.conic), proj.opacity, proj.z,
                   proj.color, np.ascontiguousarray(proj.semantic), bg,
                   out.rgb, out.feature, out.depth, out.alpha)
    return out


def _pack_conic(conic):
    return np.ascontiguousarray(conic[:, [0, 0, 1], [0, 1, 1]])


def reference_render(gmap: GaussianMap, pose: Pose, cam: CameraIntrinsics,
                     background=None) -> RenderOutput:
    """Naive oracle: every retained splat evaluated at every pixel, full
    per-pixel front-to-back loop, no tiling, no early termination."""
    gmap.check_consistent()
    K = gmap.feature_dim
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    H, W = cam.height, cam.width
    out = RenderOutput(rgb=np.tile(bg, (H, W, 1)), feature=np.zeros((H, W, K)),
                       depth=np.zeros((H, W)), alpha=np.zeros((H, W)))
    proj = _project_all(gmap, pose, cam)
    if proj is None:
        return out

    for i in range(H):
        for j in range(W):
            px, py = j + 0.5, i + 0.5
            T = 1.0
            acc = 0.0
            rgb = np.zeros(3)
            feat = np.zeros(K)
            depth = 0.0
            for s in range(proj.idx.size):
                dx = px - proj.mean2d[s, 0]
                dy = py - proj.mean2d[s, 1]
                A = proj.conic[s]
                maha = A[0, 0] * dx * dx + 2 * A[0, 1] * dx * dy + A[1, 1] * dy * dy
                if maha > CUTOFF_MAHAL_SQ:
                    continue
                g, _ = _gaussian_windowed(maha)
                alpha = min(proj.opacity[s] * g, ALPHA_CLAMP)
                wgt = alpha * T
                rgb += wgt * proj.color[s]
                feat += wgt * proj.semantic[s]
                depth += wgt * proj.z[s]
                acc += wgt
                T *= 1.0 - alpha
            out.rgb[i, j] = rgb + (1.0 - acc) * bg
            out.feature[i, j] = feat
            out.depth[i, j] = depth
            out.alpha[i, j] = acc
    return out


@dataclass
class RenderGradients:
    positions: np.ndarray       # (N,3)
    log_scales: np.ndarray      # (N,3)
    rotations: np.ndarray       # (N,4), includes quaternion-normalization Jacobian
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N,3)
    semantics: np.ndarray       # (N,K)
    pose: np.ndarray            # (6,) d/d xi for T_w2c <- exp(xi) T_w2c
    mean2d_norm: np.ndarray     # (N,) per-splat ||dL/dmean2d|| for densification
    visible: np.ndarray         # (N,) bool


def render_backward(gmap: GaussianMap, pose: Pose, cam: CameraIntrinsics,
                    background, d_rgb, d_feature, d_depth, d_alpha) -> RenderGradients:
    """Analytic gradients of the tiled renderer.

    Upstream gradients may be None (treated as zero). Shapes must match the
    forward call or a ContractViolation is raised.
    """
    gmap.check_consistent()
    n, K = len(gmap), gmap.feature_dim
    H, W = cam.height, cam.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)

    def _check(g, shape, name):
        if g is None:
            return np.zeros(shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ContractViolation(f"upstream {name} gradient shape {g.shape} != {shape}")
        return g

    d_rgb = _check(d_rgb, (H, W, 3), "rgb")
    d_feature = _check(d_feature, (H, W, K), "feature")
    d_depth = _check(d_depth, (H, W), "depth")
    d_alpha = _check(d_alpha, (H, W), "alpha")

    grads = RenderGradients(
        positions=np.zeros((n, 3)), log_scales=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)), opacity_logits=np.zeros(n),
        colors=np.zeros((n, 3)), semantics=np.zeros((n, K)),
        pose=np.zeros(6), mean2d_norm=np.zeros(n), visible=np.zeros(n, dtype=bool),
    )
    proj = _project_all(gmap, pose, cam)
    if proj is None:
        return grads
    M = proj.idx.size
    grads.visible[proj.idx] = True

    # accumulated per projected splat (sorted order)
    d_mean2d = np.zeros((M, 2))
    d_conic3 = np.zeros((M, 3))
    d_z = np.zeros(M)
    d_opac = np.zeros(M)
    d_color = np.zeros((M, 3))
    d_sem = np.zeros((M, K))

    start, flat, ntx, nty = _tile_lists(proj, cam)
    _backward_tiles(start, flat, ntx, nty, H, W,
                    proj.mean2d, _pack_conic(proj.conic), proj.opacity, proj.z,
                    proj.color, np.ascontiguousarray(proj.semantic), bg,
                    d_rgb, d_feature, d_depth, d_alpha,
                    d_mean2d, d_conic3, d_z, d_opac, d_color, d_sem)

    # d maha/d conic accumulated as (c00, c01, c11); conic = cov2d^{-1}
    # means dV = -A dcon A (the off-diagonal carries both symmetric halves)
    dcon = np.empty((M, 2, 2))
    dcon[:, 0, 0] = d_conic3[:, 0]
    dcon[:, 0, 1] = dcon[:, 1, 0] = d_conic3[:, 1]
    dcon[:, 1, 1] = d_conic3[:, 2]
    d_cov2d = -np.einsum('nij,njk,nkl->nil', proj.conic, dcon, proj.conic)

    # ---- geometric chain, vectorized over projected splats ----
    Wrot, _ = pose.world_to_camera()
    pc, J, cov_cam = proj.pc, proj.J, proj.cov_cam

    # mean2d and depth -> camera point
    d_pc = np.einsum('nji,nj->ni', J, d_mean2d)
    d_pc[:, 2] += d_z

    # cov2d = J cov_cam J^T (+floor): gradients to cov_cam and J
    d_cov_cam = np.einsum('nji,njk,nkl->nil', J, d_cov2d, J)
    d_J = 2.0 * np.einsum('nij,njk,nkl->nil', d_cov2d, J, cov_cam)

    # J entries depend on pc
    fx, fy = cam.fx, cam.fy
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    d_pc[:, 0] += d_J[:, 0, 2] * (-fx / z ** 2)
    d_pc[:, 1] += d_J[:, 1, 2] * (-fy / z ** 2)
    d_pc[:, 2] += (d_J[:, 0, 0] * (-fx / z ** 2) + d_J[:, 1, 1] * (-fy / z ** 2)
                   + d_J[:, 0, 2] * (2 * fx * x / z ** 3)
                   + d_J[:, 1, 2] * (2 * fy * y / z ** 3))

    # cov_cam = W cov3d W^T
    d_cov3d = np.einsum('ji,njk,kl->nil', Wrot, d_cov_cam, Wrot)

    # cov3d = M M^T with M = R diag(s)
    scales = np.exp(gmap.log_scales[proj.idx])
    R3 = quat_to_rot_batch(gmap.rotations[proj.idx])
    Mmat = R3 * scales[:, None, :]
    d_M = 2.0 * np.einsum('nij,njk->nik', d_cov3d, Mmat)
    d_s = np.einsum('nrk,nrk->nk', R3, d_M)
    d_log_scale = d_s * scales
    d_R3 = d_M * scales[:, None, :]
    d_quat = quat_to_rot_backward(gmap.rotations[proj.idx], d_R3)

    d_pos = d_pc @ Wrot

    # pose tangent xi = (rho, phi), T_w2c <- exp(xi) T_w2c
    grads.pose[:3] = d_pc.sum(axis=0)
    grads.pose[3:] = np.cross(pc, d_pc).sum(axis=0)
    B = np.einsum('nij,njk->nik', cov_cam, d_cov_cam) \
        - np.einsum('nij,njk->nik', d_cov_cam, cov_cam)
    Bs = B.sum(axis=0)
    grads.pose[3:] += -2.0 * np.array([Bs[2, 1], Bs[0, 2], Bs[1, 0]])

    opac = proj.opacity
    idx = proj.idx
    grads.positions[idx] = d_pos
    grads.log_scales[idx] = d_log_scale
    grads.rotations[idx] = d_quat
    grads.opacity_logits[idx] = d_opac * opac * (1.0 - opac)
    grads.colors[idx] = d_color
    grads.semantics[idx] = d_sem
    grads.mean2d_norm[idx] = np.linalg.norm(d_mean2d, axis=1)
    return grads


def perturb_pose(pose: Pose, xi) -> Pose:
    """Retraction used by tracking and by the gradient checks:
    T_w2c <- exp(xi) T_w2c, returned as a camera-to-world Pose."""
    Rwc, twc = pose.world_to_camera()
    dR, dt = se3_exp(np.asarray(xi, dtype=np.float64))
    Rn = dR @ Rwc
    tn = dR @ twc + dt
    Rc2w = Rn.T
    return Pose(rot_to_quat(Rc2w), -Rn.T @ tn)
