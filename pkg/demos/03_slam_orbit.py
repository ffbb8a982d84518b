"""Walkthrough: the full loop on a small synthetic orbit -- generate a
dataset, run tracking + mapping, evaluate the trajectory and renders, then
query the reconstructed scene with class embeddings.

This is a scaled-down version of the acceptance run (20 frames at 120x90
instead of 60 at 160x120) so it finishes in a couple of minutes. The same
pipeline is available from the command line:

    semsplat synth --out /tmp/orbit --frames 20
    semsplat run-slam --dataset /tmp/orbit/manifest.txt --out /tmp/run
    semsplat eval --pred-traj /tmp/run/trajectory.txt \
                  --gt-traj /tmp/orbit/gt_trajectory.txt

Run:  python demos/03_slam_orbit.py
"""
import os
import tempfile
import time

import numpy as np

from semsplat import SlamConfig, ate_rmse, miou_macc, psnr, run_sequence
from semsplat import rasterizer
from semsplat.dataio import (generate_synthetic_dataset, iterate_frames,
                             open_dataset, read_label_map, read_rgb,
                             read_trajectory)
from semsplat.query import TextQuery, segment_multiclass
from semsplat.scene import PyramidSchedule

root = tempfile.mkdtemp(prefix="orbit_")
print("generating dataset under", root)
generate_synthetic_dataset(root, seed=7, n_splats=2500, k=4, n_classes=4,
                           width=120, height=90, n_frames=20)
man = open_dataset(os.path.join(root, "manifest.txt"))
gt = man.gt_trajectory()

cfg = SlamConfig()
cfg.schedule = PyramidSchedule(levels=2, iterations_per_level=(40, 120))

t0 = time.time()
res = run_sequence(man, iterate_frames(man), cfg, feature_dim=4,
                   gt_first_pose=gt[0][1], seed=0)
print(f"\n{len(res.trajectory)} frames in {time.time() - t0:.0f}s, "
      f"{len(res.gmap)} splats, "
      f"{sum(1 for f in res.frame_log if f['keyframe'])} keyframes")

# ------------------------------------------------------------ trajectory
ate = ate_rmse(res.trajectory, gt)
pts = np.array([p.translation for _, p in gt])
diam = np.max(np.linalg.norm(pts[:, None] - pts[None], axis=2))
print(f"ATE RMSE {ate * 1000:.1f}mm over a {diam:.2f}m-diameter trajectory "
      f"({ate / diam * 100:.2f}%)")

# ---------------------------------------------------- held-out view quality
hold = os.path.join(root, "holdout")
vals = []
for j, (_, pose) in enumerate(read_trajectory(
        os.path.join(hold, "gt_trajectory.txt"))):
    rgb = read_rgb(os.path.join(hold, "rgb", f"{j:06d}.png"))
    out = rasterizer.render(res.gmap, pose, man.intrinsics)
    vals.append(psnr(np.clip(out.rgb, 0, 1), rgb))
print("holdout PSNR (dB):", np.round(vals, 2))

# ------------------------------------------------- open-vocabulary queries
class_vecs = np.loadtxt(os.path.join(root, "class_vectors.txt"))
queries = [TextQuery(f"class_{j}", v) for j, v in enumerate(class_vecs)]
ious = []
for i, (_, pose) in enumerate(gt):
    out = rasterizer.render(res.gmap, pose, man.intrinsics)
    pred = segment_multiclass(out.feature, queries)
    gt_lab = read_label_map(os.path.join(root, "labels", f"{i:06d}.png"))
    miou, _ = miou_macc(pred, gt_lab.astype(np.int64), 4, ignore_value=0xFFFF)
    ious.append(miou)
print(f"segmentation mIoU: mean {np.mean(ious):.3f} "
      f"(min {np.min(ious):.3f} over {len(ious)} views)")

# -------------------------------------------------------------- timing table
print("\nStage                  | ms/frame")
print("-" * 34)
for name, ms in res.timing_ms.items():
    print(f"{name:<22} | {ms:8.2f}")
