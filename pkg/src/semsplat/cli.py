"""Operator entry points: one binary, subcommand style.

Numeric defaults come from the library modules; a key=value config file can
override them and explicit flags win over both. Every command is
deterministic under --seed and exits nonzero with a single-line error on
failure.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import rasterizer, slam
from .compressor import (PCAModel, compress, compress_grid, eval_compression,
                         fit_pca, load_pca, save_pca, synthesize_training_set,
                         upsample_bilinear)
from .dataio import (export_map_ply, generate_synthetic_bank,
                     generate_synthetic_dataset, import_map_ply, iterate_frames,
                     open_dataset, read_feature_file, read_label_map,
                     read_rgb, read_trajectory, write_depth, write_feature_file,
                     write_gray_u8, write_label_map, write_rgb,
                     write_trajectory, _parse_kv)
from .metrics import EvalReport, ate_rmse, miou_macc, psnr, ssim
from .query import TextQuery, compress_query, heatmap_to_u8, segment_multiclass, \
    similarity_map
from .scene import Pose, PyramidSchedule
from .slam import SlamConfig, run_sequence, timing_table

TABLE4_DIMS = (3, 6, 9, 12, 16, 24, 32, 48, 64, 80, 96, 128)


class CliError(RuntimeError):
    pass


def _apply_config(args, parser):
    """key=value config file fills in anything the command line left at its
    default; explicit flags win."""
    if not getattr(args, "config", None):
        return args
    kv = _parse_kv(args.config)
    # flag definitions live on the subcommand's parser, not the root
    actions = list(parser._actions)
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            actions += a.choices[args.command]._actions
    defaults = {a.dest: a.default for a in actions}
    for key, raw in kv.items():
        dest = key.replace("-", "_")
        if dest not in defaults:
            raise CliError(f"config: unknown key '{key}'")
        cur = getattr(args, dest)
        if cur == defaults[dest]:  # not set on the command line
            typ = type(defaults[dest]) if defaults[dest] is not None else str
            setattr(args, dest, typ(raw) if typ is not bool
                    else raw.lower() in ("1", "true", "yes"))
    return args


def _load_bank(path):
    grid = read_feature_file(path)
    bank = grid.reshape(-1, grid.shape[-1])
    if bank.shape[0] < 2:
        raise CliError(f"bank {path}: needs at least 2 rows, got {bank.shape[0]}")
    return bank


def _pose_from_string(s):
    vals = [float(v) for v in s.replace(",", " ").split()]
    if len(vals) != 7:
        raise CliError("--pose wants 'tx ty tz qx qy qz qw'")
    t = np.array(vals[:3])
    qx, qy, qz, qw = vals[3:]
    return Pose(np.array([qw, qx, qy, qz]), t)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    generate_synthetic_dataset(
        args.out, seed=args.seed, n_splats=args.n_splats, k=args.k,
        n_classes=args.n_classes, height=args.height, width=args.width,
        n_frames=args.frames, n_holdout=args.holdout, arc_deg=args.arc_deg)
    if args.bank_classes:
        bank = generate_synthetic_bank(n_classes=args.bank_classes,
                                       seed=args.seed)
        write_feature_file(os.path.join(args.out, "bank.legf"),
                           bank[None, :, :])
    print(f"dataset written to {args.out}")
    return 0


def cmd_fit_pca(args):
    bank = _load_bank(args.bank)
    rng = np.random.default_rng(args.seed)
    data = synthesize_training_set(bank, args.augment, args.min_cos, rng)
    model = fit_pca(data, args.k)
    save_pca(model, args.out)
    mean_cos, skipped = eval_compression(model, bank)
    print(f"pca k={args.k} fit on {data.shape[0]} rows "
          f"bank cos={mean_cos:.4f} -> {args.out}")
    return 0


def _slam_config(args):
    cfg = SlamConfig()
    if args.mapping_iterations:
        per = [int(v) for v in args.mapping_iterations.split(",")]
        cfg.schedule = PyramidSchedule(levels=len(per),
                                       iterations_per_level=tuple(per))
    if args.seed_stride:
        cfg.seed_stride = args.seed_stride
    return cfg


def cmd_run_slam(args):
    manifest = open_dataset(args.dataset)
    pca = load_pca(args.pca) if args.pca else None
    cfg = _slam_config(args)
    gt = manifest.gt_trajectory()
    first = gt[0][1] if gt else None
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()
    result = run_sequence(manifest, list(iterate_frames(manifest)), cfg,
                          pca=pca, feature_dim=args.feature_dim,
                          gt_first_pose=first, seed=args.seed)
    elapsed = time.time() - t0
    write_trajectory(os.path.join(args.out, "trajectory.txt"), result.trajectory)
    export_map_ply(result.gmap, os.path.join(args.out, "map.ply"))
    table = timing_table(result.timing_ms)
    with open(os.path.join(args.out, "timing.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    print(f"{len(result.trajectory)} frames, {len(result.gmap)} splats, "
          f"{elapsed:.1f}s -> {args.out}")
    if gt:
        print(f"ate_rmse_m={ate_rmse(result.trajectory, gt):.6f}")
    return 0


def cmd_render(args):
    gmap = import_map_ply(args.map)
    manifest = open_dataset(args.dataset)
    cam = manifest.intrinsics
    if args.pose:
        poses = [(0.0, _pose_from_string(args.pose))]
    elif args.trajectory:
        poses = read_trajectory(args.trajectory)
    else:
        raise CliError("render: need --pose or --trajectory")
    os.makedirs(args.out, exist_ok=True)
    for i, (_, pose) in enumerate(poses):
        out = rasterizer.render(gmap, pose, cam)
        write_rgb(os.path.join(args.out, f"rgb_{i:05d}.png"), out.rgb.clip(0, 1))
        write_depth(os.path.join(args.out, f"depth_{i:05d}.png"), out.depth,
                    manifest.depth_scale)
        if gmap.feature_dim:
            write_feature_file(os.path.join(args.out, f"feature_{i:05d}.legf"),
                               out.feature)
    print(f"{len(poses)} view(s) -> {args.out}")
    return 0


def cmd_query(args):
    gmap = import_map_ply(args.map)
    manifest = open_dataset(args.dataset)
    pose = _pose_from_string(args.pose)
    pca = load_pca(args.pca) if args.pca else None
    grid = read_feature_file(args.text_emb)
    emb = grid.reshape(-1, grid.shape[-1])
    out = rasterizer.render(gmap, pose, manifest.intrinsics)
    queries = []
    for i, row in enumerate(emb):
        q = TextQuery(f"query_{i}", row)
        queries.append(compress_query(pca, q) if pca is not None else row)
    queries = np.asarray(queries)
    if queries.shape[1] != gmap.feature_dim:
        raise CliError(f"query dim {queries.shape[1]} != map feature dim "
                       f"{gmap.feature_dim} (missing --pca?)")
    os.makedirs(args.out, exist_ok=True)
    for i, q in enumerate(queries):
        sim = similarity_map(out.feature, q, normalize=args.normalize)
        write_gray_u8(os.path.join(args.out, f"heat_{i:02d}.png"), heatmap_to_u8(sim))
    labels = segment_multiclass(out.feature, queries,
                                reject_threshold=args.reject_threshold,
                                normalize=args.normalize)
    write_label_map(os.path.join(args.out, "labels.png"), labels)
    print(f"{queries.shape[0]} heat map(s) + label map -> {args.out}")
    return 0


def cmd_eval(args):
    report = EvalReport()
    if args.pred_traj:
        if not args.gt_traj:
            raise CliError("eval: --pred-traj needs --gt-traj")
        pred = read_trajectory(args.pred_traj)
        gt = read_trajectory(args.gt_traj)
        report.ate_rmse = ate_rmse(pred, gt)
    if args.pred_dir:
        if not args.gt_dir:
            raise CliError("eval: --pred-dir needs --gt-dir")
        names = sorted(f for f in os.listdir(args.gt_dir) if f.endswith(".png")
                       and not f.startswith("label"))
        ps, ss = [], []
        for name in names:
            a = read_rgb(os.path.join(args.pred_dir, name))
            b = read_rgb(os.path.join(args.gt_dir, name))
            ps.append(psnr(a, b))
            ss.append(np.mean([ssim(a[..., c], b[..., c]) for c in range(3)]))
        if ps:
            report.psnr = float(np.mean(ps))
            report.ssim = float(np.mean(ss))
        if args.labels:
            pred_l = read_label_map(os.path.join(args.pred_dir, args.labels))
            gt_l = read_label_map(os.path.join(args.gt_dir, args.labels))
            ncls = int(gt_l[gt_l != 0xFFFF].max()) + 1 if np.any(gt_l != 0xFFFF) else 0
            if ncls:
                miou, macc, _ = miou_macc(pred_l, gt_l, ncls, ignore_value=0xFFFF)
                report.miou, report.macc = miou, macc
    if not args.pred_traj and not args.pred_dir:
        raise CliError("eval: need --pred-traj or --pred-dir")
    text = report.to_text()
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


def cmd_sweep_dims(args):
    bank = _load_bank(args.bank)
    dims = [int(v) for v in args.dims.split(",")]
    rng = np.random.default_rng(args.seed)
    data = synthesize_training_set(bank, args.augment, args.min_cos, rng)
    rows = []
    dataset = open_dataset(args.dataset) if args.dataset else None
    for k in dims:
        model = fit_pca(data, k)
        mean_cos, _ = eval_compression(model, bank)
        miou = psnr_db = float("nan")
        if dataset is not None:
            miou, psnr_db = _sweep_eval_dataset(dataset, model)
        rows.append((k, mean_cos, miou, psnr_db))
    header = f"{'Dim':>4} | {'CosSim':>7} | {'mIoU':>6} | {'PSNR':>6}"
    lines = [header, "-" * len(header)]
    for k, c, m, p in rows:
        lines.append(f"{k:>4} | {c:7.4f} | {m:6.3f} | {p:6.2f}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        with open(args.out, "w") as f:
            f.write(table + "\n")
    return 0


def _sweep_eval_dataset(manifest, model):
    """Table 4 protocol on a synthetic dataset: compress each labeled frame's
    feature grid to K dims, upsample, segment against the compressed class
    embeddings, and report mIoU; PSNR is the stored-RGB fidelity of renders
    from the ground-truth map when present."""
    ious, psnrs = [], []
    root = manifest.root
    gt = manifest.gt_trajectory()
    gt_map_path = os.path.join(root, "gt_map.ply")
    gmap = import_map_ply(gt_map_path) if os.path.exists(gt_map_path) and gt else None
    class_path = os.path.join(root, "class_vectors.txt")
    class_vecs = np.loadtxt(class_path) if os.path.exists(class_path) else None
    for i, frame in iterate_frames(manifest):
        label_path = manifest.frames[i][3]
        if frame is None or frame.feature is None or label_path is None:
            continue
        if class_vecs is None or frame.feature.shape[-1] != class_vecs.shape[-1]:
            continue
        gt_labels = read_label_map(label_path)
        grid_k = compress_grid(model, frame.feature)
        up_k = upsample_bilinear(grid_k, gt_labels.shape[0], gt_labels.shape[1])
        qs = np.array([compress_query(model, TextQuery(f"class_{j}", v))
                       for j, v in enumerate(class_vecs)])
        labels = segment_multiclass(up_k, qs)
        miou, _, _ = miou_macc(labels, gt_labels, class_vecs.shape[0],
                               ignore_value=0xFFFF)
        ious.append(miou)
        if gmap is not None and i < len(gt):
            out = rasterizer.render(gmap, gt[i][1], manifest.intrinsics)
            psnrs.append(psnr(out.rgb.clip(0, 1), frame.rgb))
    return (float(np.mean(ious)) if ious else float("nan"),
            float(np.mean(psnrs)) if psnrs else float("nan"))


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="semsplat",
                                description="Language-embedded Gaussian "
                                            "splatting SLAM toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--n-splats", type=int, default=600)
    s.add_argument("--k", type=int, default=8, help="semantic feature dim")
    s.add_argument("--n-classes", type=int, default=4)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--holdout", type=int, default=3)
    s.add_argument("--arc-deg", type=float, default=70.0)
    s.add_argument("--bank-classes", type=int, default=0,
                   help="also emit bank.legf with this many embedding classes")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-pca", help="fit the PCA compressor on an embedding bank")
    s.add_argument("--bank", required=True, help="LEGF bank file")
    s.add_argument("--k", type=int, required=True, help="compressed dimension")
    s.add_argument("--augment", type=int, default=10, help="noisy copies per row")
    s.add_argument("--min-cos", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", required=True, help="output LEGP file")
    s.set_defaults(func=cmd_fit_pca)

    s = sub.add_parser("run-slam", help="track and map an RGB-D sequence")
    s.add_argument("--dataset", required=True, help="dataset manifest file")
    s.add_argument("--pca", help="LEGP compressor (for raw 768-dim features)")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--feature-dim", type=int, default=None)
    s.add_argument("--mapping-iterations", default="",
                   help="comma list, iterations per pyramid level")
    s.add_argument("--seed-stride", type=int, default=0)
    s.set_defaults(func=cmd_run_slam)

    s = sub.add_parser("render", help="render views from a saved map")
    s.add_argument("--map", required=True, help="PLY map file")
    s.add_argument("--dataset", required=True, help="manifest (intrinsics)")
    s.add_argument("--pose", help="'tx ty tz qx qy qz qw'")
    s.add_argument("--trajectory", help="TUM trajectory file")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("query", help="open-vocabulary query against a map")
    s.add_argument("--map", required=True, help="PLY map file")
    s.add_argument("--dataset", required=True, help="manifest (intrinsics)")
    s.add_argument("--pose", required=True, help="'tx ty tz qx qy qz qw'")
    s.add_argument("--pca", help="LEGP compressor for 768-dim queries")
    s.add_argument("--text-emb", required=True, help="LEGF query embeddings")
    s.add_argument("--normalize", action="store_true", help="cosine instead of dot")
    s.add_argument("--reject-threshold", type=float, default=None)
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("eval", help="trajectory / render-quality evaluation")
    s.add_argument("--pred-traj")
    s.add_argument("--gt-traj")
    s.add_argument("--pred-dir")
    s.add_argument("--gt-dir")
    s.add_argument("--labels", help="label-map filename inside the dirs")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", help="write the report here too")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-dims", help="Table-4-style dimensionality sweep")
    s.add_argument("--bank", required=True, help="LEGF bank file")
    s.add_argument("--dataset", help="optional dataset for mIoU/PSNR columns")
    s.add_argument("--dims", default=",".join(str(d) for d in TABLE4_DIMS))
    s.add_argument("--augment", type=int, default=10)
    s.add_argument("--min-cos", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--out", help="write the table here too")
    s.set_defaults(func=cmd_sweep_dims)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(args, parser)
        return args.func(args)
    except Exception as e:  # single-line machine-parseable failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
