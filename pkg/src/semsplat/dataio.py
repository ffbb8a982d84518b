"""Dataset ingestion, binary formats (LEGF feature grids, PLY maps, TUM
trajectories, key=value manifests), and the synthetic scene generator that
provides desk-scale ground truth."""

import logging
import os
import struct
from dataclasses import dataclass, field

import cv2
import numpy as np

from .compressor import resize_bilinear
from .geometry import quat_normalize, rot_to_quat
from .scene import CameraIntrinsics, FrameBundle, GaussianMap, Pose, logit

log = logging.getLogger(__name__)

LEGF_MAGIC = b"LEGF"
LEGF_VERSION = 1


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- LEGF grids

def write_feature_file(path, grid):
    """magic "LEGF", version u32=1, h u32, w u32, C u32, then h*w*C f32 LE,
    row-major channel-last."""
    grid = np.ascontiguousarray(np.asarray(grid), dtype="<f4")
    if grid.ndim != 3:
        raise FormatError("feature grid must be h x w x C")
    h, w, c = grid.shape
    with open(path, "wb") as f:
        f.write(LEGF_MAGIC)
        f.write(struct.pack("<IIII", LEGF_VERSION, h, w, c))
        f.write(grid.tobytes())


def read_feature_file(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != LEGF_MAGIC:
            raise FormatError(f"bad magic {magic!r} in {path}")
        header = f.read(16)
        if len(header) != 16:
            raise FormatError(f"truncated header in {path}")
        version, h, w, c = struct.unpack("<IIII", header)
        if version != LEGF_VERSION:
            raise FormatError(f"unsupported LEGF version {version}")
        expected = 4 * h * w * c
        payload = f.read(expected + 1)
    if len(payload) != expected:
        raise FormatError(f"payload length {len(payload)} != {expected} in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)


# -------------------------------------------------------------------- images

def write_rgb(path, rgb):
    """RGB floats in [0,1] -> 16-bit PNG (keeps round-trip error below 1e-5)."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    u16 = np.round(arr * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), cv2.cvtColor(u16, cv2.COLOR_RGB2BGR)):
        raise IOError(f"failed to write {path}")


def read_rgb(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IOError(f"failed to read {path}")
    img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(np.float64) / scale


def write_depth(path, depth_m, depth_scale):
    u16 = np.round(np.asarray(depth_m) * depth_scale).astype(np.uint16)
    if not cv2.imwrite(str(path), u16):
        raise IOError(f"failed to write {path}")


def read_depth(path, depth_scale):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IOError(f"failed to read {path}")
    return img.astype(np.float64) / depth_scale


def write_label_map(path, labels):
    if not cv2.imwrite(str(path), np.asarray(labels, dtype=np.uint16)):
        raise IOError(f"failed to write {path}")


def read_label_map(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise IOError(f"failed to read {path}")
    return img.astype(np.uint16)


def write_gray_u8(path, img):
    if not cv2.imwrite(str(path), np.asarray(img, dtype=np.uint8)):
        raise IOError(f"failed to write {path}")


# ----------------------------------------------------------------- PLY maps

_PLY_BASE_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
                   "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
                   "red", "green", "blue"]


def export_map_ply(gmap: GaussianMap, path):
    """Binary little-endian PLY; log-scales and opacity logits stored raw,
    semantic channels as f_0..f_{K-1}."""
    gmap.check_consistent()
    k = gmap.feature_dim
    props = _PLY_BASE_PROPS + [f"f_{i}" for i in range(k)]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(gmap)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    data = np.hstack([
        gmap.positions, gmap.log_scales, gmap.rotations,
        gmap.opacity_logits[:, None], gmap.colors, gmap.semantics,
    ]).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def import_map_ply(path) -> GaussianMap:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise FormatError(f"not a PLY file: {path}")
    header = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n"):]
    count = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
        elif line.startswith("format") and "binary_little_endian" not in line:
            raise FormatError("only binary little-endian PLY is supported")
    if count is None:
        raise FormatError("missing vertex element")
    missing = [p for p in _PLY_BASE_PROPS if p not in props]
    if missing:
        raise FormatError(f"PLY missing properties: {missing}")
    fprops = sorted([p for p in props if p.startswith("f_")],
                    key=lambda s: int(s.split("_")[1]))
    k = len(fprops)
    if fprops != [f"f_{i}" for i in range(k)]:
        raise FormatError("non-contiguous semantic properties f_*")
    arr = np.frombuffer(body, dtype="<f4", count=count * len(props))
    arr = arr.reshape(count, len(props)).astype(np.float64)
    col = {p: i for i, p in enumerate(props)}
    gmap = GaussianMap(k)
    gmap.append(
        arr[:, [col["x"], col["y"], col["z"]]],
        arr[:, [col["scale_0"], col["scale_1"], col["scale_2"]]],
        quat_normalize(arr[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]]),
        arr[:, col["opacity"]],
        arr[:, [col["red"], col["green"], col["blue"]]],
        arr[:, [col[p] for p in fprops]] if k else np.zeros((count, 0)),
    )
    return gmap


# ------------------------------------------------------------- trajectories

def write_trajectory(path, trajectory):
    """TUM-style: timestamp tx ty tz qx qy qz qw, one pose per line."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in trajectory:
            t = pose.translation
            w, x, y, z = pose.rotation
            f.write(f"{ts:.9g} {t[0]:.9g} {t[1]:.9g} {t[2]:.9g} "
                    f"{x:.9g} {y:.9g} {z:.9g} {w:.9g}\n")


def read_trajectory(path):
    traj = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                ts, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            traj.append((ts, Pose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    return traj


# ---------------------------------------------------------------- manifests

def _parse_kv(path):
    kv = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ManifestError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
    return kv


@dataclass
class DatasetManifest:
    root: str
    intrinsics: CameraIntrinsics
    depth_scale: float
    frames: list = field(default_factory=list)  # (rgb, depth, feature|None, label|None, ts)
    gt_trajectory_path: str | None = None

    def gt_trajectory(self):
        if self.gt_trajectory_path is None:
            return None
        return read_trajectory(self.gt_trajectory_path)


def open_dataset(manifest_path) -> DatasetManifest:
    """Parse a key=value manifest and enumerate its frame files.

    Layout keys: fx fy cx cy width height depth_scale [fps] and directories
    rgb_dir depth_dir [feature_dir] [label_dir] with zero-padded frame
    indices, plus optional gt_trajectory.
    """
    kv = _parse_kv(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    try:
        intr = CameraIntrinsics(
            fx=float(kv["fx"]), fy=float(kv["fy"]),
            cx=float(kv["cx"]), cy=float(kv["cy"]),
            width=int(kv["width"]), height=int(kv["height"]))
        depth_scale = float(kv["depth_scale"])
    except KeyError as e:
        raise ManifestError(f"{manifest_path}: missing key {e}") from None
    intr.validate()
    if depth_scale <= 0:
        raise ManifestError("depth_scale must be > 0")
    fps = float(kv.get("fps", 30.0))

    rgb_dir = os.path.join(root, kv.get("rgb_dir", "rgb"))
    depth_dir = os.path.join(root, kv.get("depth_dir", "depth"))
    feat_dir = kv.get("feature_dir")
    label_dir = kv.get("label_dir")
    if feat_dir:
        feat_dir = os.path.join(root, feat_dir)
    if label_dir:
        label_dir = os.path.join(root, label_dir)

    names = sorted(n for n in os.listdir(rgb_dir) if n.endswith(".png"))
    frames = []
    for i, name in enumerate(names):
        stem = os.path.splitext(name)[0]
        rgb_path = os.path.join(rgb_dir, name)
        depth_path = os.path.join(depth_dir, name)
        if not os.path.exists(depth_path):
            log.warning("frame %s: missing depth file, skipped", stem)
            continue
        feat_path = None
        if feat_dir:
            cand = os.path.join(feat_dir, stem + ".legf")
            feat_path = cand if os.path.exists(cand) else None
        label_path = None
        if label_dir:
            cand = os.path.join(label_dir, name)
            label_path = cand if os.path.exists(cand) else None
        frames.append((rgb_path, depth_path, feat_path, label_path, i / fps))

    gt_path = kv.get("gt_trajectory")
    manifest = DatasetManifest(
        root=root, intrinsics=intr, depth_scale=depth_scale, frames=frames,
        gt_trajectory_path=os.path.join(root, gt_path) if gt_path else None)
    return manifest


def iterate_frames(manifest: DatasetManifest):
    """Yield (index, FrameBundle) in timestamp order; unreadable frames are
    skipped with a log entry."""
    for i, (rgb_p, depth_p, feat_p, _label_p, ts) in enumerate(manifest.frames):
        try:
            rgb = read_rgb(rgb_p)
            depth = read_depth(depth_p, manifest.depth_scale)
            feature = read_feature_file(feat_p).astype(np.float64) if feat_p else None
        except (IOError, FormatError) as e:
            log.warning("frame %d unreadable: %s", i, e)
            yield i, None
            continue
        yield i, FrameBundle(rgb=rgb, depth=depth, feature=feature, timestamp=ts)


# -------------------------------------------------------- synthetic dataset

def _look_at(position, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world pose looking from position toward target (+z forward)."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return Pose(rot_to_quat(R), position)


def random_orthonormal_vectors(n, dim, rng):
    mat = rng.standard_normal((dim, max(n, 1)))
    q, _ = np.linalg.qr(mat)
    return q[:, :n].T


def make_ground_truth_map(rng, n_splats, k, n_classes, radius=1.0):
    """Opaque room-shaped scene: flat splats tiled over the walls, floor and
    ceiling of an axis-aligned box plus a few interior blob objects. Near-unit
    opacity makes rendered depth behave like a surface depth map, which RGB-D
    style tracking and seeding rely on. Each splat carries one of n_classes
    orthonormal K-dim class vectors, assigned by nearest spatial anchor so the
    classes form coherent regions. Returns (map, class_vectors, class_of_splat)."""
    if k < n_classes:
        raise ValueError(f"need k >= n_classes orthonormal class vectors "
                         f"(k={k}, n_classes={n_classes})")
    class_vecs = random_orthonormal_vectors(n_classes, k, rng)
    half = np.array([2.2, 1.5, 2.2]) * radius   # room half-extents
    n_wall = int(n_splats * 0.85)
    n_obj = n_splats - n_wall

    # faces: (normal axis, sign); counts proportional to face area
    faces = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)]
    areas = []
    for ax, _ in faces:
        t = [i for i in range(3) if i != ax]
        areas.append(4.0 * half[t[0]] * half[t[1]])
    counts = np.maximum((np.array(areas) / sum(areas) * n_wall).astype(int), 1)
    counts[0] += n_wall - counts.sum()

    pos, scales = [], []
    for (ax, sg), cnt in zip(faces, counts):
        t = [i for i in range(3) if i != ax]
        # near-square grid over the face, jittered
        nu = max(int(np.rint(np.sqrt(cnt * half[t[0]] / half[t[1]]))), 1)
        nv = max(cnt // nu, 1)
        us = np.linspace(-1, 1, nu, endpoint=False) + 1.0 / nu
        vs = np.linspace(-1, 1, nv, endpoint=False) + 1.0 / nv
        uu, vv = np.meshgrid(us * half[t[0]], vs * half[t[1]])
        p = np.zeros((uu.size, 3))
        p[:, ax] = sg * half[ax]
        p[:, t[0]] = uu.ravel()
        p[:, t[1]] = vv.ravel()
        p += rng.normal(0, 0.15 * 2 * half[t[0]] / nu, size=p.shape)
        p[:, ax] = sg * half[ax]                 # keep splats on the face plane
        spacing = 2 * half[t[0]] / nu
        s = np.empty((p.shape[0], 3))
        s[:, ax] = 0.02 * radius                 # thin along the face normal
        s[:, t[0]] = s[:, t[1]] = 0.9 * spacing  # overlap keeps alpha near 1
        pos.append(p)
        scales.append(s)
    # interior blob objects for parallax and occlusion
    n_blobs = max(n_classes - 1, 2)
    centers = rng.uniform(-0.45, 0.45, size=(n_blobs, 3)) * half
    bi = rng.integers(0, n_blobs, size=n_obj)
    pos.append(centers[bi] + rng.normal(0, 0.12 * radius, size=(n_obj, 3)))
    scales.append(np.full((n_obj, 3), 0.09 * radius))
    pos = np.concatenate(pos)
    scales = np.concatenate(scales)
    n_total = pos.shape[0]

    anchors = rng.uniform(-1, 1, size=(n_classes, 3)) * half
    cls = np.linalg.norm(pos[:, None, :] - anchors[None], axis=2).argmin(axis=1)
    gmap = GaussianMap(k)
    gmap.append(
        pos,
        np.log(scales),
        np.tile([1.0, 0.0, 0.0, 0.0], (n_total, 1)),
        logit(rng.uniform(0.90, 0.99, size=n_total)),
        rng.uniform(0.05, 0.95, size=(n_total, 3)),
        class_vecs[cls],
    )
    return gmap, class_vecs, cls


def orbit_trajectory(n_frames, radius=1.2, arc_deg=70.0, height=0.25,
                     target=(0.0, 0.0, 0.0)):
    poses = []
    for i in range(n_frames):
        theta = np.radians(arc_deg) * (i / max(n_frames - 1, 1) - 0.5)
        pos = np.array([radius * np.sin(theta),
                        height * np.sin(2 * theta),
                        -radius * np.cos(theta)])
        poses.append(_look_at(pos, target))
    return poses


def generate_synthetic_dataset(out_dir, seed=0, n_splats=600, k=8, n_classes=4,
                               height=120, width=160, n_frames=20,
                               n_holdout=3, feature_grid=37, depth_scale=5000.0,
                               arc_deg=70.0, fps=30.0):
    """Render a seeded ground-truth splat cloud along an orbit and write a
    complete dataset: 16-bit RGB/depth PNGs, 37x37xK LEGF feature grids,
    16-bit label maps, ground-truth trajectory, map PLY and manifest.
    Held-out frames (between training poses) go to holdout/ for evaluation.
    Deterministic under seed."""
    from . import rasterizer  # local import to keep module load light

    rng = np.random.default_rng(seed)
    gmap, class_vecs, _ = make_ground_truth_map(rng, n_splats, k, n_classes)
    cam = CameraIntrinsics(fx=width * 0.75, fy=width * 0.75,
                           cx=width / 2.0, cy=height / 2.0,
                           width=width, height=height)
    poses = orbit_trajectory(n_frames + n_holdout, arc_deg=arc_deg)
    hold_idx = set()
    if n_holdout:
        step = (n_frames + n_holdout) // (n_holdout + 1)
        hold_idx = {step * (i + 1) for i in range(n_holdout)}

    for sub in ("rgb", "depth", "features", "labels",
                "holdout/rgb", "holdout/depth", "holdout/labels"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    traj = []
    hold_traj = []
    ti = hi = 0
    for fi, pose in enumerate(poses):
        out = rasterizer.render(gmap, pose, cam)
        # surface-style depth: expected depth given a hit, invalid off-surface
        depth = np.where(out.alpha > 0.5,
                         out.depth / np.maximum(out.alpha, 1e-6), 0.0)
        labels = np.where(out.alpha > 0.5,
                          (out.feature @ class_vecs.T).argmax(axis=2),
                          int(0xFFFF)).astype(np.uint16)
        if fi in hold_idx:
            stem = f"{hi:06d}"
            base = os.path.join(out_dir, "holdout")
            hold_traj.append((hi / fps, pose))
            hi += 1
        else:
            stem = f"{ti:06d}"
            base = out_dir
            write_feature_file(os.path.join(out_dir, "features", stem + ".legf"),
                               resize_bilinear(out.feature, feature_grid, feature_grid))
            traj.append((ti / fps, pose))
            ti += 1
        write_rgb(os.path.join(base, "rgb", stem + ".png"), out.rgb)
        write_depth(os.path.join(base, "depth", stem + ".png"), depth, depth_scale)
        write_label_map(os.path.join(base, "labels", stem + ".png"), labels)

    write_trajectory(os.path.join(out_dir, "gt_trajectory.txt"), traj)
    write_trajectory(os.path.join(out_dir, "holdout", "gt_trajectory.txt"), hold_traj)
    export_map_ply(gmap, os.path.join(out_dir, "gt_map.ply"))
    np.savetxt(os.path.join(out_dir, "class_vectors.txt"), class_vecs)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write(f"fx={cam.fx}\nfy={cam.fy}\ncx={cam.cx}\ncy={cam.cy}\n"
                f"width={cam.width}\nheight={cam.height}\n"
                f"depth_scale={depth_scale}\nfps={fps}\n"
                "rgb_dir=rgb\ndepth_dir=depth\nfeature_dir=features\n"
                "label_dir=labels\ngt_trajectory=gt_trajectory.txt\n"
                f"feature_dim={k}\n")
    return os.path.join(out_dir, "manifest.txt")


def generate_synthetic_bank(n_classes=40, per_class=25, dim=768, seed=0,
                            spread=0.08):
    """Random unit cluster centers with Gaussian intra-class spread; a stand-in
    for a text-embedding bank in desk-scale tests. `spread` is the expected
    norm of the intra-class perturbation relative to the unit centers, so the
    bank's intrinsic dimension stays ~n_classes. Returns (N, dim)."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    rows = centers[:, None, :] + rng.normal(0, spread / np.sqrt(dim),
                                            size=(n_classes, per_class, dim))
    rows = rows.reshape(-1, dim)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)
