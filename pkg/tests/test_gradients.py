"""Finite-difference validation of the analytic backward pass.

Acceptance contract: on scenes of <= 20 splats at <= 16x16 resolution, every
parameter gradient matches central differences (h = 1e-4) within relative
1e-3 or absolute 1e-6.
"""
import numpy as np
import pytest

from semsplat import rasterizer
from semsplat.geometry import quat_normalize
from semsplat.scene import CameraIntrinsics, GaussianMap, Pose, logit

H = 1e-4
REL_TOL = 1e-3
ABS_TOL = 1e-6

CAM = CameraIntrinsics(fx=30.0, fy=28.0, cx=8.0, cy=7.0, width=16, height=14)
BG = np.array([0.1, 0.2, 0.3])


def random_map(n, k, rng):
    m = GaussianMap(k)
    m.append(
        rng.uniform(-0.5, 0.5, (n, 3)) + [0, 0, 2.5],
        np.log(rng.uniform(0.05, 0.3, (n, 3))),
        quat_normalize(rng.normal(size=(n, 4))),
        logit(rng.uniform(0.2, 0.8, n)),
        rng.uniform(0.1, 0.9, (n, 3)),
        rng.normal(size=(n, k)),
    )
    return m


def random_pose(rng):
    q = quat_normalize(np.concatenate([[1.0], 0.05 * rng.normal(size=3)]))
    return Pose(q, 0.1 * rng.normal(size=3))


def make_problem(seed, n=8, k=4):
    rng = np.random.default_rng(seed)
    gmap = random_map(n, k, rng)
    pose = random_pose(rng)
    up = {
        "d_rgb": rng.normal(size=(CAM.height, CAM.width, 3)),
        "d_feature": rng.normal(size=(CAM.height, CAM.width, k)),
        "d_depth": rng.normal(size=(CAM.height, CAM.width)),
        "d_alpha": rng.normal(size=(CAM.height, CAM.width)),
    }

    def loss(m, p):
        out = rasterizer.render(m, p, CAM, BG)
        return (np.sum(out.rgb * up["d_rgb"])
                + np.sum(out.feature * up["d_feature"])
                + np.sum(out.depth * up["d_depth"])
                + np.sum(out.alpha * up["d_alpha"]))

    grads = rasterizer.render_backward(gmap, pose, CAM, BG, up["d_rgb"],
                                       up["d_feature"], up["d_depth"],
                                       up["d_alpha"])
    return gmap, pose, loss, grads


def fd_param(gmap, pose, loss, name):
    arr = getattr(gmap, name)
    fd = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + H
        fp = loss(gmap, pose)
        arr[i] = orig - H
        fm = loss(gmap, pose)
        arr[i] = orig
        fd[i] = (fp - fm) / (2 * H)
    return fd


def check(ana, fd):
    err = np.abs(ana - fd)
    rel = err / np.maximum(np.abs(fd), 1e-6)
    ok = (rel <= REL_TOL) | (err <= ABS_TOL)
    assert np.all(ok), f"max_rel={rel.max():.3e} max_abs={err.max():.3e}"


@pytest.mark.parametrize("name", GaussianMap.PARAM_NAMES)
def test_splat_parameter_gradients(name):
    gmap, pose, loss, grads = make_problem(3)
    check(getattr(grads, name), fd_param(gmap, pose, loss, name))


def test_pose_gradient():
    gmap, pose, loss, grads = make_problem(3)
    fd = np.zeros(6)
    for i in range(6):
        xi = np.zeros(6)
        xi[i] = H
        fp = loss(gmap, rasterizer.perturb_pose(pose, xi))
        xi[i] = -H
        fm = loss(gmap, rasterizer.perturb_pose(pose, xi))
        fd[i] = (fp - fm) / (2 * H)
    check(grads.pose, fd)


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_gradients_more_scenes(seed):
    gmap, pose, loss, grads = make_problem(seed, n=12, k=3)
    for name in ("positions", "opacity_logits", "colors"):
        check(getattr(grads, name), fd_param(gmap, pose, loss, name))


def test_single_splat_20_splat_bound():
    # the largest configuration the acceptance criterion names
    gmap, pose, loss, grads = make_problem(21, n=20, k=2)
    check(grads.positions, fd_param(gmap, pose, loss, "positions"))
